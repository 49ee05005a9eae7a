use clap::Parser;
use zo_forge::Cli;
use zo_forge_core::alloc::CountingAlloc;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

fn main() {
    let cli = Cli::parse();
    if let Err(e) = zo_forge::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
