use std::io::{self, BufRead, Write};

use super::adapters::{run_adapter, AdapterSpec};
use super::protocol::{Shim, ShimError, Transport};

/// Requests go to stdout, responses arrive on stdin.
struct StdioTransport {
    input: io::StdinLock<'static>,
    output: io::StdoutLock<'static>,
}

impl Transport for StdioTransport {
    fn call(&mut self, line: &str) -> Result<String, ShimError> {
        writeln!(self.output, "{line}")
            .and_then(|()| self.output.flush())
            .map_err(|_| ShimError::Closed)?;
        let mut response = String::new();
        match self.input.read_line(&mut response) {
            Ok(0) | Err(_) => Err(ShimError::Closed),
            Ok(_) => Ok(response.trim_end_matches(['\n', '\r']).to_owned()),
        }
    }
}

/// Entry point of an adapter child process. Returns the exit code.
pub fn run_host(spec: &str) -> i32 {
    let spec = match AdapterSpec::parse(spec) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            return 2;
        }
    };
    let mut transport = StdioTransport {
        input: io::stdin().lock(),
        output: io::stdout().lock(),
    };
    let mut shim = Shim::new(&mut transport);
    match run_adapter(&spec, &mut shim) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            1
        }
    }
}
