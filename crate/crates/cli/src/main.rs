use std::io::{self, Write};
use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = mcpval_cli::Cli::parse();
    let stdout = io::stdout();
    let stderr = io::stderr();
    let code = mcpval_cli::execute(&cli, &mut stdout.lock(), &mut stderr.lock());
    let _ = io::stdout().flush();
    ExitCode::from(code)
}
