fn main() {
    std::process::exit(air_service::cli::main());
}
