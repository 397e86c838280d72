fn main() {
    std::process::exit(tracecloud_ctl::main_with(std::env::args_os()));
}
