fn main() {
    std::process::exit(gbdsde_cli::run(std::env::args_os()));
}
