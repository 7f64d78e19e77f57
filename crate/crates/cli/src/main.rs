fn main() {
    std::process::exit(rollout_eval_cli::run_from(std::env::args_os()));
}
