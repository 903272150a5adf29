fn main() {
    sparselab::cli::main()
}
