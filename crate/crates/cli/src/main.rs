fn main() {
    std::process::exit(sketchvar_cli::run(std::env::args_os()));
}
