fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DGC_LOG", "info")).init();
    std::process::exit(dgc::cli::run(std::env::args_os()));
}
