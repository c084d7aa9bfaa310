fn main() {
    std::process::exit(snap_cli::run(std::env::args_os()));
}
