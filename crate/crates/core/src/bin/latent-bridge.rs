fn main() {
    std::process::exit(latent_bridge::harness::cli_main(std::env::args_os()));
}
