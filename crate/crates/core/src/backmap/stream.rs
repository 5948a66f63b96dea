//! Batched, ordered, resumable surface reconstruction and its archive.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use super::{index_ranges, Axis, Backmapper, Hypersurface, IndexRanges, Mode, SurfaceIndex};
use crate::archive::{Archive, ArchiveLayout, ArchiveWriter, RecordMeta, NO_TAG};
use crate::error::{Error, Result};
use crate::network::{LayerId, NetworkGraph};
use crate::tensor::{DType, Scalar};

pub const HYPERSURFACE_MAGIC: [u8; 4] = *b"ABMH";
const TAG_AXES: [Axis; 4] = [Axis::S, Axis::J, Axis::I, Axis::K];

/// Optional per-axis index subsets; `None` selects the whole axis.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IndexFilter {
    pub s: Option<Vec<usize>>,
    pub j: Option<Vec<usize>>,
    pub i: Option<Vec<usize>>,
    pub k: Option<Vec<usize>>,
}

impl IndexFilter {
    pub fn get(&self, axis: Axis) -> Option<&[usize]> {
        match axis {
            Axis::S => self.s.as_deref(),
            Axis::J => self.j.as_deref(),
            Axis::I => self.i.as_deref(),
            Axis::K => self.k.as_deref(),
        }
    }

    pub fn set(&mut self, axis: Axis, values: Vec<usize>) {
        let slot = match axis {
            Axis::S => &mut self.s,
            Axis::J => &mut self.j,
            Axis::I => &mut self.i,
            Axis::K => &mut self.k,
        };
        *slot = Some(values);
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReconstructionRequest {
    pub mode: Mode,
    pub layer: LayerId,
    pub filter: IndexFilter,
}

impl ReconstructionRequest {
    pub fn new(mode: Mode, layer: LayerId) -> Self {
        ReconstructionRequest {
            mode,
            layer,
            filter: IndexFilter::default(),
        }
    }

    pub fn only(mut self, axis: Axis, values: impl IntoIterator<Item = usize>) -> Self {
        self.filter.set(axis, values.into_iter().collect());
        self
    }

    /// Validates the request against `net` and fixes the emission order.
    pub fn plan<T: Scalar>(&self, net: &NetworkGraph<T>) -> Result<SurfacePlan> {
        let ranges = index_ranges(net, self.mode, self.layer)?;
        for axis in TAG_AXES {
            if self.filter.get(axis).is_some() && !self.mode.axes().contains(&axis) {
                return Err(Error::invalid(format!(
                    "{} does not use index {}",
                    self.mode,
                    axis.name()
                )));
            }
        }
        let axes = self
            .mode
            .axes()
            .iter()
            .map(|&axis| {
                let limit = ranges.len(axis);
                let values = match self.filter.get(axis) {
                    None => (0..limit).collect(),
                    Some(v) => {
                        let mut v = v.to_vec();
                        v.sort_unstable();
                        v.dedup();
                        if let Some(&bad) = v.iter().find(|&&x| x >= limit) {
                            return Err(Error::IndexOutOfRange {
                                what: axis.name(),
                                index: bad,
                                limit,
                            });
                        }
                        v
                    }
                };
                Ok((axis, values))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SurfacePlan {
            mode: self.mode,
            layer: self.layer,
            ranges,
            axes,
        })
    }
}

/// Lazy ordinal → index mapping of a validated request. The first axis
/// varies slowest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SurfacePlan {
    mode: Mode,
    layer: LayerId,
    ranges: IndexRanges,
    axes: Vec<(Axis, Vec<usize>)>,
}

impl SurfacePlan {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn layer(&self) -> LayerId {
        self.layer
    }

    pub fn ranges(&self) -> IndexRanges {
        self.ranges
    }

    pub fn len(&self) -> u64 {
        self.axes.iter().map(|(_, v)| v.len() as u64).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, ordinal: u64) -> SurfaceIndex {
        let mut rest = ordinal;
        let mut index = SurfaceIndex::default();
        for (axis, values) in self.axes.iter().rev() {
            let n = values.len() as u64;
            index.set(*axis, values[(rest % n) as usize]);
            rest /= n;
        }
        index
    }
}

/// Iterator over surfaces in plan order. Surfaces are computed in parallel
/// chunks; the emission order does not depend on scheduling.
pub struct SurfaceStream<'a, T> {
    mapper: Backmapper<'a, T>,
    plan: SurfacePlan,
    next: u64,
    chunk: usize,
    buffer: VecDeque<Result<Hypersurface<T>>>,
}

impl<'a, T: Scalar> SurfaceStream<'a, T> {
    pub fn new(mapper: Backmapper<'a, T>, plan: SurfacePlan) -> Self {
        let chunk = 4 * rayon::current_num_threads().max(1);
        SurfaceStream {
            mapper,
            plan,
            next: 0,
            chunk,
            buffer: VecDeque::new(),
        }
    }

    /// Number of surfaces computed per parallel batch.
    pub fn with_chunk(mut self, chunk: usize) -> Self {
        self.chunk = chunk.max(1);
        self
    }

    pub fn plan(&self) -> &SurfacePlan {
        &self.plan
    }

    /// Ordinal of the next surface to be yielded.
    pub fn position(&self) -> u64 {
        self.next - self.buffer.len() as u64
    }

    /// Continues from `ordinal` (e.g. a position saved before an interruption).
    pub fn resume_at(&mut self, ordinal: u64) -> Result<()> {
        if ordinal > self.plan.len() {
            return Err(Error::IndexOutOfRange {
                what: "stream ordinal",
                index: ordinal as usize,
                limit: self.plan.len() as usize,
            });
        }
        self.buffer.clear();
        self.next = ordinal;
        Ok(())
    }

    fn fill(&mut self) {
        let end = (self.next + self.chunk as u64).min(self.plan.len());
        let mapper = self.mapper;
        let plan = &self.plan;
        let batch: Vec<Result<Hypersurface<T>>> = (self.next..end)
            .into_par_iter()
            .map(|ordinal| {
                let index = plan.index(ordinal);
                mapper
                    .surface(plan.mode, plan.layer, index)
                    .map_err(|e| Error::Surface {
                        ordinal,
                        index: index.to_string(),
                        source: Box::new(e),
                    })
            })
            .collect();
        self.buffer.extend(batch);
        self.next = end;
    }

    /// Streams the remaining surfaces into a hypersurface archive and
    /// returns how many were written.
    pub fn write_archive<W: Write>(self, out: W, dtype: DType) -> Result<(u64, W)> {
        self.write_archive_with(out, dtype, |_| Ok(()))
    }

    /// Like [`SurfaceStream::write_archive`], handing each surface to
    /// `visit` after it is written.
    pub fn write_archive_with<W: Write>(
        mut self,
        out: W,
        dtype: DType,
        mut visit: impl FnMut(&Hypersurface<T>) -> Result<()>,
    ) -> Result<(u64, W)> {
        let layout = archive_layout(&self.plan, self.mapper.net(), dtype, self.mapper.linearized().trace().point().k());
        let mut writer = ArchiveWriter::new(out, layout)?;
        let mut count = 0;
        for surface in self.by_ref() {
            let h = surface?;
            writer.push(&h.tensor, record_meta(&h.index))?;
            visit(&h)?;
            count += 1;
        }
        Ok((count, writer.finish()?))
    }

    pub fn save_archive(self, path: impl AsRef<Path>, dtype: DType) -> Result<u64> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        Ok(self.write_archive(file, dtype)?.0)
    }
}

impl<T: Scalar> Iterator for SurfaceStream<'_, T> {
    type Item = Result<Hypersurface<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.buffer.is_empty() && self.next < self.plan.len() {
            self.fill();
        }
        self.buffer.pop_front()
    }
}

fn layer_tag(layer: LayerId) -> (u8, u32) {
    match layer {
        LayerId::Conv(n) => (0, n as u32),
        LayerId::Fc => (1, 0),
    }
}

fn archive_layout<T: Scalar>(plan: &SurfacePlan, net: &NetworkGraph<T>, dtype: DType, eval_k: f64) -> ArchiveLayout {
    let mut header = vec![plan.mode.tag()];
    let (kind, n) = layer_tag(plan.layer);
    header.push(kind);
    header.extend_from_slice(&n.to_le_bytes());
    header.extend_from_slice(&eval_k.to_le_bytes());
    let r = plan.ranges;
    for v in [r.grid.0, r.grid.1, r.in_channels, r.out_channels, r.classes] {
        header.extend_from_slice(&(v as u32).to_le_bytes());
    }
    ArchiveLayout {
        magic: HYPERSURFACE_MAGIC,
        dtype,
        tag_count: TAG_AXES.len(),
        value_count: 0,
        header,
        element_shape: net.input_shape().to_vec(),
    }
}

fn record_meta(index: &SurfaceIndex) -> RecordMeta {
    RecordMeta {
        tags: TAG_AXES
            .iter()
            .map(|&a| index.get(a).map_or(NO_TAG, |v| v as u32))
            .collect(),
        values: Vec::new(),
    }
}

/// Reader for archives produced by [`SurfaceStream::write_archive`].
#[derive(Clone, Debug)]
pub struct HypersurfaceArchive {
    archive: Archive,
    mode: Mode,
    layer: LayerId,
    eval_k: f64,
    ranges: IndexRanges,
}

impl HypersurfaceArchive {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(Archive::open(path, HYPERSURFACE_MAGIC)?)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        Self::from_archive(Archive::from_bytes(bytes, HYPERSURFACE_MAGIC)?)
    }

    fn from_archive(archive: Archive) -> Result<Self> {
        let h = &archive.layout().header;
        if h.len() != 1 + 1 + 4 + 8 + 5 * 4 || archive.layout().tag_count != TAG_AXES.len() {
            return Err(Error::Malformed("hypersurface archive header has the wrong size".into()));
        }
        let mode = Mode::from_tag(h[0])
            .ok_or_else(|| Error::Malformed(format!("unknown mode tag {}", h[0])))?;
        let n = u32::from_le_bytes(h[2..6].try_into().expect("4")) as usize;
        let layer = match h[1] {
            0 => LayerId::Conv(n),
            1 => LayerId::Fc,
            other => return Err(Error::Malformed(format!("unknown layer kind {other}"))),
        };
        let eval_k = f64::from_le_bytes(h[6..14].try_into().expect("8"));
        let v: Vec<usize> = h[14..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4")) as usize)
            .collect();
        Ok(HypersurfaceArchive {
            archive,
            mode,
            layer,
            eval_k,
            ranges: IndexRanges {
                grid: (v[0], v[1]),
                in_channels: v[2],
                out_channels: v[3],
                classes: v[4],
            },
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn layer(&self) -> LayerId {
        self.layer
    }

    pub fn eval_k(&self) -> f64 {
        self.eval_k
    }

    pub fn ranges(&self) -> IndexRanges {
        self.ranges
    }

    pub fn dtype(&self) -> DType {
        self.archive.layout().dtype
    }

    pub fn len(&self) -> usize {
        self.archive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.archive.is_empty()
    }

    pub fn index(&self, r: usize) -> SurfaceIndex {
        let mut index = SurfaceIndex::default();
        for (axis, &tag) in TAG_AXES.iter().zip(&self.archive.meta(r).tags) {
            if tag != NO_TAG {
                index.set(*axis, tag as usize);
            }
        }
        index
    }

    pub fn surface<T: Scalar>(&self, r: usize) -> Result<Hypersurface<T>> {
        Ok(Hypersurface {
            tensor: self.archive.tensor(r)?,
            mode: self.mode,
            layer: self.layer,
            index: self.index(r),
            eval_k: self.eval_k,
        })
    }
}
