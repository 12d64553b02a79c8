use std::process::ExitCode;

fn main() -> ExitCode {
    match ssmlab::cli::run(std::env::args_os()) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = e.exit_code();
            if code == 0 {
                print!("{e}");
            } else {
                eprintln!("ssmlab: {e}");
            }
            ExitCode::from(code as u8)
        }
    }
}
