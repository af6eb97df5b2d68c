fn main() -> std::process::ExitCode {
    mdp_routing::cli::main()
}
