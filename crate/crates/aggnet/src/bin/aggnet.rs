fn main() { std::process::exit(aggnet::cli::main()); }
