//! Encodes an embedding tensor, decodes it back and shows that a flipped
//! byte is caught by the checksum.

use std::path::Path;

use slim::store::{decode_embedding, encode_embedding, EmbeddingTensor, Subspace, SLEM_HEADER_LEN};

fn main() -> slim::Result<()> {
    let (k, f, t) = (11, 8, 5);
    let data: Vec<f32> = (0..k * f * t).map(|i| (i as f32 * 0.37).sin()).collect();
    let emb = EmbeddingTensor::new(Subspace::Style, k, f, t, data)?;

    let bytes = encode_embedding(&emb);
    println!("{} bytes: {SLEM_HEADER_LEN} header + {} payload + 4 crc", bytes.len(), 4 * k * f * t);
    let back = decode_embedding(&bytes, Path::new("memory"))?;
    assert_eq!(back, emb);
    println!("decoded {} K={} F={} T={}", back.subspace().as_str(), back.layers(), back.features(), back.frames());

    let mut corrupt = bytes.clone();
    corrupt[SLEM_HEADER_LEN + 3] ^= 0x40;
    match decode_embedding(&corrupt, Path::new("memory")) {
        Ok(_) => println!("corruption went unnoticed"),
        Err(e) => println!("corrupted copy rejected: {e} (exit code {})", e.exit_code()),
    }
    let truncated = &bytes[..bytes.len() - 10];
    if let Err(e) = decode_embedding(truncated, Path::new("memory")) {
        println!("truncated copy rejected: {e}");
    }
    Ok(())
}
