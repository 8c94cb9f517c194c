fn main() {
    let code = match polyhuman::cli::run(std::env::args_os(), &mut |line| println!("{line}")) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}
