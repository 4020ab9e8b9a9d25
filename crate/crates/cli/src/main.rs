fn main() {
    let argv: Vec<String> = std::env::args().collect();
    let code = uniseg_cli::run_command(&argv, &mut std::io::stdout(), &mut std::io::stderr());
    std::process::exit(code);
}
