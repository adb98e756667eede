fn main() {
    std::process::exit(distillforge::cli::main());
}
