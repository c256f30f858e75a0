fn main() {
    std::process::exit(hopespeech::cli::dispatch(std::env::args()));
}
