use env_logger::Env;

fn main() {
    env_logger::Builder::from_env(Env::default().filter_or("PROTOFL_LOG", "warn")).init();
    std::process::exit(protofl::cli::main_with_args(std::env::args_os()));
}
