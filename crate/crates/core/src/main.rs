fn main() {
    std::process::exit(reroll::run_cli())
}
