// SPDX-License-Identifier: Apache-2.0

use datalair::cli::{run, Passwords};

fn main() {
    let code = run(
        std::env::args_os(),
        &Passwords::from_env(),
        &mut std::io::stdout(),
        &mut std::io::stderr(),
    );
    std::process::exit(code);
}
