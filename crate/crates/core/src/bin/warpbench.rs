fn main() {
    std::process::exit(warpbench::cli::dispatch(std::env::args_os()));
}
