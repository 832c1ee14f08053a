//! Writes a synthetic fixture-source directory.
//!
//! `cargo run --example synthetic_corpus -- <dir> [n] [seed]`

fn main() -> surveyg::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "synthetic".into());
    let n = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    surveyg::synthetic::write_fixture(std::path::Path::new(&dir), n, seed)?;
    println!("wrote {n} papers to {dir}");
    Ok(())
}
