// SPDX-License-Identifier: MIT OR Apache-2.0

fn main() {
    std::process::exit(additive_recall::cli::dispatch(std::env::args_os()));
}
