use std::process::ExitCode;

use loco_cli::{dispatch, parse_args, thread_count, CliError};

fn run() -> Result<Vec<String>, CliError> {
    let threads = thread_count(std::env::var("LOCO_THREADS").ok().as_deref())?;
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Usage(format!("`LOCO_THREADS`: {e}")))?;
    }
    let (command, config) = parse_args(std::env::args_os())?;
    dispatch(command, &config)
}

fn main() -> ExitCode {
    match run() {
        Ok(lines) => {
            for line in lines {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("loco: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
