//! Write a linearly separable two-class CSV dataset.
//!
//! ```text
//! cargo run --example make_dataset -- OUT.csv [N] [DIM] [SEED]
//! ```

use qzo::data::Dataset;

fn main() -> qzo::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(out) = args.first() else {
        eprintln!("usage: make_dataset OUT.csv [N] [DIM] [SEED]");
        std::process::exit(2);
    };
    let arg = |i: usize, default: u64| args.get(i).map_or(Ok(default), |s| s.parse::<u64>());
    let parse = |r: Result<u64, _>| r.map_err(|e: std::num::ParseIntError| qzo::Error::InvalidArgument(e.to_string()));
    let n = parse(arg(1, 512))? as usize;
    let dim = parse(arg(2, 16))? as usize;
    let seed = parse(arg(3, 1))?;
    Dataset::linearly_separable(n, dim, 0.1, seed)?.write_csv(out)?;
    println!("wrote {n} samples of dimension {dim} to {out}");
    Ok(())
}
