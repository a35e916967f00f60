fn main() {
    std::process::exit(ctxsub::cli::main());
}
