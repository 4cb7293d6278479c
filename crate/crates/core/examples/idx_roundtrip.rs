//! Writes rendered digits and their labels as IDX files, reads them back,
//! and prints the header of each file.
//!
//! ```text
//! cargo run --example idx_roundtrip -- [out_dir]
//! ```

use std::path::PathBuf;

use arbench::workbench::{load_idx, load_idx_labels, parse_idx, synthetic_digits, write_idx_images, write_idx_labels};

fn main() -> arbench::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/idx".into()));
    let digits = synthetic_digits(64, 1, false)?;
    let images = out.join("digits-images.idx3-ubyte");
    let labels = out.join("digits-labels.idx1-ubyte");
    write_idx_images(&images, &digits.examples, &digits.bins)?;
    write_idx_labels(&labels, digits.labels.as_deref().expect("rendered digits are labeled"))?;

    for path in [&images, &labels] {
        let bytes = std::fs::read(path).map_err(|e| arbench::Error::io(path, e))?;
        let arr = parse_idx(&bytes)?;
        println!("{}: magic 0x{:04x}, dims {:?}, {} bytes", path.display(), arr.magic, arr.dims, bytes.len());
    }
    let back = load_idx(&images)?;
    let back_labels = load_idx_labels(&labels)?;
    println!("images identical after round trip: {}", back.examples == digits.examples);
    println!("labels identical after round trip: {}", Some(&back_labels) == digits.labels.as_ref());
    Ok(())
}
