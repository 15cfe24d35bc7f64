/// Rotary position embedding over interleaved pairs `(2i, 2i+1)` of each head.
#[derive(Debug, Clone)]
pub struct Rope {
    half: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

pub const ROPE_BASE: f64 = 10_000.0;

/// Rotation angle for `pair` at `position`.
pub fn rope_angle(position: usize, pair: usize, d_head: usize) -> f64 {
    let inv_freq = ROPE_BASE.powf(-2.0 * pair as f64 / d_head as f64);
    position as f64 * inv_freq
}

impl Rope {
    pub fn new(d_head: usize, max_seq: usize) -> Self {
        let half = d_head / 2;
        let mut cos = Vec::with_capacity(max_seq * half);
        let mut sin = Vec::with_capacity(max_seq * half);
        for pos in 0..max_seq {
            for i in 0..half {
                let a = rope_angle(pos, i, d_head);
                cos.push(a.cos() as f32);
                sin.push(a.sin() as f32);
            }
        }
        Self { half, cos, sin }
    }

    /// Rotate one row laid out as `n_heads` consecutive heads.
    pub fn apply(&self, row: &mut [f32], position: usize) {
        let d_head = self.half * 2;
        let cos = &self.cos[position * self.half..(position + 1) * self.half];
        let sin = &self.sin[position * self.half..(position + 1) * self.half];
        for head in row.chunks_mut(d_head) {
            for i in 0..self.half {
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * cos[i] - b * sin[i];
                head[2 * i + 1] = a * sin[i] + b * cos[i];
            }
        }
    }
}
