use clap::Parser;
use rkhs_calib::cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let code = match Cli::try_parse() {
        Ok(cli) => run(&cli),
        Err(e) => {
            let _ = e.print();
            // usage errors are input errors; help and version are not errors
            i32::from(e.use_stderr())
        }
    };
    std::process::exit(code);
}
