use crate::model::ImageSpec;

/// Image indices of one encode shard.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shard {
    pub images: Vec<usize>,
    pub tiles: u32,
    pub image_tokens: u64,
}

/// Splits a request's images into at most `n_shards` shards balanced by tile
/// count: images are taken largest first and each goes to the lightest
/// shard. Empty shards are dropped; the result is ordered heaviest first.
pub fn encode_shard(images: &[ImageSpec], n_shards: usize) -> Vec<Shard> {
    let n = n_shards.max(1).min(images.len());
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(images[i].tiles), i));
    let mut shards: Vec<Shard> = (0..n)
        .map(|_| Shard {
            images: Vec::new(),
            tiles: 0,
            image_tokens: 0,
        })
        .collect();
    for i in order {
        let s = (0..n).min_by_key(|&s| (shards[s].tiles, s)).unwrap();
        shards[s].images.push(i);
        shards[s].tiles += images[i].tiles;
        shards[s].image_tokens += u64::from(images[i].image_tokens);
    }
    shards.retain(|s| !s.images.is_empty());
    for s in &mut shards {
        s.images.sort_unstable();
    }
    shards.sort_by_key(|s| std::cmp::Reverse(s.tiles));
    shards
}
