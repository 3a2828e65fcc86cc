fn main() {
    std::process::exit(ensemble_distill::cli::dispatch(std::env::args_os()));
}
