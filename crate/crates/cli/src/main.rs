fn main() {
    let code = capsnet3d_cli::run(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}
