//! Toy packer for harness tests: scrambles every byte with a fixed XOR so
//! signatures and n-gram content vanish while length is preserved.
//!
//! Usage: mockpack [--identity | --fail] <input> <output>

use std::process::exit;

const KEY: u8 = 0xA5;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (mode, rest) = match args.first().map(String::as_str) {
        Some("--identity") => ("identity", &args[1..]),
        Some("--fail") => ("fail", &args[1..]),
        _ => ("xor", &args[..]),
    };
    let [input, output] = rest else {
        eprintln!("usage: mockpack [--identity | --fail] <input> <output>");
        exit(2);
    };
    if mode == "fail" {
        eprintln!("mockpack: refusing {input}");
        exit(1);
    }
    let mut bytes = match std::fs::read(input) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("mockpack: {input}: {e}");
            exit(1);
        }
    };
    if mode == "xor" {
        for b in &mut bytes {
            *b ^= KEY;
        }
    }
    if let Err(e) = std::fs::write(output, bytes) {
        eprintln!("mockpack: {output}: {e}");
        exit(1);
    }
}
