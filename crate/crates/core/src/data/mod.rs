//! Procedural toy-face corpus: identities, rendering, corpus files and batching.

mod corpus;
mod render;

pub use corpus::{
    build_corpus, load_batch, Batch, Corpus, CorpusConfig, CorpusMeta, Phase, Sample, SampleRecord, DEFAULT_POSES,
};
pub use render::{mesh_triangles, render_face, TextureParams, ToyIdentity, BACKGROUND, POLE_BOTTOM, POLE_TOP};

/// Mixes a base seed with a stream index into an independent child seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
