//! Pull-based streams of exceedance indicators `1{T_i >= t}`.

use std::io::BufRead;
use std::sync::mpsc::{sync_channel, Receiver};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The simulation generator used throughout the crate.
pub type SimRng = ChaCha8Rng;

/// Seeded generator on stream `stream`. Different streams of the same seed
/// are independent, which is how nested simulations are split.
pub fn sim_rng(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A failure of the underlying sampler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceError(pub String);

impl std::fmt::Display for SourceError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for SourceError {}

/// Yields bits on demand; `Ok(None)` marks the end of a finite stream.
pub trait BitSource {
    fn next_bit(&mut self) -> Result<Option<bool>, SourceError>;
}

impl<S: BitSource + ?Sized> BitSource for &mut S {
    fn next_bit(&mut self) -> Result<Option<bool>, SourceError> {
        (**self).next_bit()
    }
}

impl<S: BitSource + ?Sized> BitSource for Box<S> {
    fn next_bit(&mut self) -> Result<Option<bool>, SourceError> {
        (**self).next_bit()
    }
}

/// Independent Bernoulli(p) draws.
#[derive(Debug, Clone)]
pub struct BernoulliSource {
    p: f64,
    rng: SimRng,
}

impl BernoulliSource {
    pub fn new(p: f64, seed: u64) -> Self {
        Self::with_rng(p, sim_rng(seed, 0))
    }

    pub fn with_rng(p: f64, rng: SimRng) -> Self {
        BernoulliSource { p: p.clamp(0.0, 1.0), rng }
    }
}

impl BitSource for BernoulliSource {
    fn next_bit(&mut self) -> Result<Option<bool>, SourceError> {
        Ok(Some(self.rng.random::<f64>() < self.p))
    }
}

/// Text input with one `0` or `1` per line. Blank lines and surrounding
/// whitespace are ignored.
pub struct TextSource<R> {
    reader: R,
    line: String,
    lineno: u64,
}

impl<R: BufRead> TextSource<R> {
    pub fn new(reader: R) -> Self {
        TextSource { reader, line: String::new(), lineno: 0 }
    }
}

impl<R: BufRead> BitSource for TextSource<R> {
    fn next_bit(&mut self) -> Result<Option<bool>, SourceError> {
        loop {
            self.line.clear();
            let read = self
                .reader
                .read_line(&mut self.line)
                .map_err(|e| SourceError(format!("read error after line {}: {e}", self.lineno)))?;
            if read == 0 {
                return Ok(None);
            }
            self.lineno += 1;
            match self.line.trim() {
                "" => continue,
                "0" => return Ok(Some(false)),
                "1" => return Ok(Some(true)),
                other => return Err(SourceError(format!("line {}: expected 0 or 1, got {other:?}", self.lineno))),
            }
        }
    }
}

/// Adapts a closure.
pub struct FnSource<F>(pub F);

impl<F> BitSource for FnSource<F>
where
    F: FnMut() -> Result<Option<bool>, SourceError>,
{
    fn next_bit(&mut self) -> Result<Option<bool>, SourceError> {
        (self.0)()
    }
}

/// A fixed sequence of bits, then end of stream.
#[derive(Debug, Clone)]
pub struct SliceSource<'a> {
    bits: &'a [bool],
    pos: usize,
}

impl<'a> SliceSource<'a> {
    pub fn new(bits: &'a [bool]) -> Self {
        SliceSource { bits, pos: 0 }
    }
}

impl BitSource for SliceSource<'_> {
    fn next_bit(&mut self) -> Result<Option<bool>, SourceError> {
        let bit = self.bits.get(self.pos).copied();
        self.pos += 1;
        Ok(bit)
    }
}

/// Wraps a source and limits it to `limit` bits.
pub struct Take<S> {
    inner: S,
    remaining: u64,
}

impl<S: BitSource> Take<S> {
    pub fn new(inner: S, limit: u64) -> Self {
        Take { inner, remaining: limit }
    }
}

impl<S: BitSource> BitSource for Take<S> {
    fn next_bit(&mut self) -> Result<Option<bool>, SourceError> {
        if self.remaining == 0 {
            return Ok(None);
        }
        self.remaining -= 1;
        self.inner.next_bit()
    }
}

/// Produces bits on a background thread and hands them over in generation
/// order through a bounded channel.
///
/// The consumer sees exactly the sequence the wrapped source would have
/// produced, so seeded runs stay reproducible; only the generation overlaps
/// with consumption. Bits generated ahead of a stop are discarded.
pub struct Prefetch {
    rx: Receiver<Vec<Result<Option<bool>, SourceError>>>,
    buffer: std::vec::IntoIter<Result<Option<bool>, SourceError>>,
    done: bool,
}

impl Prefetch {
    pub fn spawn<S>(mut source: S, batch: usize, depth: usize) -> Self
    where
        S: BitSource + Send + 'static,
    {
        let batch = batch.max(1);
        let (tx, rx) = sync_channel(depth.max(1));
        // The worker exits on its next send once the receiver is dropped.
        std::thread::spawn(move || loop {
            let mut chunk = Vec::with_capacity(batch);
            let mut last = false;
            for _ in 0..batch {
                let item = source.next_bit();
                last = !matches!(item, Ok(Some(_)));
                chunk.push(item);
                if last {
                    break;
                }
            }
            if tx.send(chunk).is_err() || last {
                return;
            }
        });
        Prefetch { rx, buffer: Vec::new().into_iter(), done: false }
    }
}

impl BitSource for Prefetch {
    fn next_bit(&mut self) -> Result<Option<bool>, SourceError> {
        loop {
            if let Some(item) = self.buffer.next() {
                if !matches!(item, Ok(Some(_))) {
                    self.done = true;
                }
                return item;
            }
            if self.done {
                return Ok(None);
            }
            match self.rx.recv() {
                Ok(chunk) => self.buffer = chunk.into_iter(),
                Err(_) => {
                    self.done = true;
                    return Err(SourceError("prefetch worker terminated".into()));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn drain<S: BitSource>(mut s: S, n: usize) -> Vec<Option<bool>> {
        (0..n).map(|_| s.next_bit().unwrap()).collect()
    }

    #[test]
    fn text_source_tolerates_whitespace() {
        let input = "1\n  0 \n\n1\r\n";
        let bits = drain(TextSource::new(input.as_bytes()), 4);
        assert_eq!(bits, vec![Some(true), Some(false), Some(true), None]);
    }

    #[test]
    fn text_source_rejects_garbage() {
        let mut s = TextSource::new("1\n2\n".as_bytes());
        assert_eq!(s.next_bit(), Ok(Some(true)));
        assert!(s.next_bit().unwrap_err().0.contains("line 2"));
    }

    #[test]
    fn bernoulli_is_seeded() {
        let a = drain(BernoulliSource::new(0.3, 9), 200);
        let b = drain(BernoulliSource::new(0.3, 9), 200);
        let c = drain(BernoulliSource::new(0.3, 10), 200);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn streams_are_distinct() {
        let mut a = sim_rng(1, 0);
        let mut b = sim_rng(1, 1);
        assert_ne!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn prefetch_preserves_order() {
        let direct = drain(BernoulliSource::new(0.4, 3), 5000);
        let fetched = drain(Prefetch::spawn(BernoulliSource::new(0.4, 3), 64, 4), 5000);
        assert_eq!(direct, fetched);
    }

    #[test]
    fn prefetch_forwards_end_of_stream() {
        let bits = [true, false, true];
        let owned: Vec<bool> = bits.to_vec();
        let mut i = 0;
        let src = FnSource(move || {
            let b = owned.get(i).copied();
            i += 1;
            Ok(b)
        });
        let out = drain(Prefetch::spawn(src, 2, 1), 5);
        assert_eq!(out, vec![Some(true), Some(false), Some(true), None, None]);
    }

    #[test]
    fn take_limits() {
        let out = drain(Take::new(BernoulliSource::new(1.0, 0), 2), 3);
        assert_eq!(out, vec![Some(true), Some(true), None]);
    }
}
