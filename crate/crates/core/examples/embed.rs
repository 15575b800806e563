//! Embeds one synthetic image and prints the descriptor grid.

use ldca::dataset::ChannelStats;
use ldca::embedder::{embed_image, init_embedder, Mode};
use ldca::episode::ImageRef;
use ldca::synthetic::{generate_splits, SyntheticSpec};

fn main() -> ldca::Result<()> {
    let splits = generate_splits(&SyntheticSpec::desk(0))?;
    let image = splits[0].image(
        ImageRef { class: 0, image: 0 },
        &ChannelStats::of_split(&splits[0])?,
    )?;
    let map = embed_image(&image, &init_embedder(0), Mode::Eval)?;
    println!(
        "image {:?} -> {} descriptors of width {} on a {}x{} grid",
        image.shape(),
        map.count(),
        map.channels(),
        map.height(),
        map.width()
    );
    let d = map.descriptor(map.index_of(3, 4));
    println!("descriptor at (3, 4): first values {:.3?}", &d[..4]);
    Ok(())
}
