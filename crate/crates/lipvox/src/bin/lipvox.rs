fn main() {
    lipvox::cli::main();
}
