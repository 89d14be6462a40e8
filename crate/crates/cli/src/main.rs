fn main() {
    std::process::exit(fdilsim_cli::cli_main(std::env::args_os()));
}
