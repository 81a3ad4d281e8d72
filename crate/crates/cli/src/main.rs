use normsphere::verify::Probes;

fn main() {
    let code = normsphere_cli::run(std::env::args_os(), &Probes::default(), &mut std::io::stdout(), &mut std::io::stderr());
    std::process::exit(code);
}
