fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("AESD_LOG", "warn")).init();
    std::process::exit(aesindy::cli::run(std::env::args_os()));
}
