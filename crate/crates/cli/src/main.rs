fn main() {
    std::process::exit(convseg_cli::dispatch(std::env::args_os()));
}
