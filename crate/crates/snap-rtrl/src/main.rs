fn main() {
    std::process::exit(snap_rtrl::harness::cli::run());
}
