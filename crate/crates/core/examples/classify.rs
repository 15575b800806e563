//! Image-to-class classification of a query against three class pools.

use ldca::classifier::{classify, ClassPool};
use ldca::descriptors::DescriptorMap;
use ldca_tensor::Tensor;

fn main() -> ldca::Result<()> {
    let pools = vec![
        ClassPool::new(0, Tensor::from_rows(&[&[1.0, 0.0, 0.0], &[0.9, 0.1, 0.0]]))?,
        ClassPool::new(1, Tensor::from_rows(&[&[0.0, 1.0, 0.0], &[0.1, 0.9, 0.2]]))?,
        ClassPool::new(2, Tensor::from_rows(&[&[0.0, 0.0, 1.0], &[0.3, 0.0, 0.9]]))?,
    ];
    // a 3-channel 1x2 map: two descriptors leaning towards class 1
    let query = DescriptorMap::new(Tensor::new(&[3, 1, 2], vec![0.2, 0.0, 0.8, 1.0, 0.1, 0.0])?)?;
    for k in [1, 2] {
        let out = classify(&query, &pools, k)?;
        println!("k = {k}: scores {:.4?} -> class {}", out.scores, out.label);
    }
    Ok(())
}
