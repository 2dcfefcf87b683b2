//! Writes sample grids of the private corpus and shifted public corpora.

use ifgmi_core::data::{make_private_dataset, make_public_dataset, ShiftConfig};
use ifgmi_core::image::write_grid;

fn main() -> ifgmi_core::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| ".".into());
    let private = make_private_dataset(0, 8, 20)?;
    let picks: Vec<usize> = (0..8).flat_map(|c| (0..8).map(move |s| c * 16 + s)).collect();
    write_grid(format!("{out}/private.ppm"), &private.train.images.select_rows(&picks), 8)?;
    for sigma in [0.0, 0.35, 0.9] {
        let public = make_public_dataset(0, 500, ShiftConfig::new(sigma))?;
        let first: Vec<usize> = (0..64).collect();
        write_grid(format!("{out}/public_{sigma}.ppm"), &public.images.select_rows(&first), 8)?;
    }
    Ok(())
}
