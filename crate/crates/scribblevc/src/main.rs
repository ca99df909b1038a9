fn main() {
    std::process::exit(scribblevc::cli::dispatch(std::env::args_os()));
}
