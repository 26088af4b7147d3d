use clap::Parser;
use expd::cli::{self, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("starting runtime");
    let code = rt.block_on(cli::run(cli));
    // connection tasks may still be parked on reads
    rt.shutdown_timeout(std::time::Duration::from_millis(100));
    std::process::exit(code);
}
