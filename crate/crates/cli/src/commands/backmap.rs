use std::collections::BTreeMap;

use anyhow::{Context, Result};
use backmap_core::adjoint::trace;
use backmap_core::backmap::{Axis, Backmapper, Hypersurface, Mode, ReconstructionRequest, SurfaceIndex, SurfaceStream};
use backmap_core::render::{
    class_grid, encode, render_surface, sheet_file_name, surface_file_name, tile_channels, tile_strides,
};
use backmap_core::tensor::Scalar;

use super::{evaluation_point, load_network, prepare, samples, write};
use crate::args::{BackmapArgs, RenderKind};

pub fn run<T: Scalar>(a: &BackmapArgs) -> Result<bool> {
    prepare(&a.common)?;
    let net = load_network::<T>(&a.model, a.common.seed)?;
    let sample = samples(&net, &a.input, 1, a.common.seed)?.remove(0);
    let point = evaluation_point(a.z_scale)?;
    let tr = trace(&net, &sample.x, point)?;
    let mapper = Backmapper::new(&net, &tr)?;

    let mut request = ReconstructionRequest::new(a.rm, a.layer);
    for (axis, values) in [(Axis::S, &a.s), (Axis::J, &a.j), (Axis::I, &a.i), (Axis::K, &a.k)] {
        if let Some(v) = values {
            request = request.only(axis, v.iter().copied());
        }
    }
    let plan = request.plan(&net)?;
    let ranges = plan.ranges();
    let arch = net.arch();
    let archive_path = a.common.out.join(format!("{arch}_{}_{}.abmh", a.rm, a.layer));
    let file = std::io::BufWriter::new(
        std::fs::File::create(&archive_path)
            .with_context(|| format!("creating {}", archive_path.display()))?,
    );

    let mut kept: Vec<Hypersurface<T>> = Vec::new();
    let mut rendered = 0usize;
    let stream = SurfaceStream::new(mapper, plan);
    let (count, mut file) = stream.write_archive_with(file, T::DTYPE, |h| {
        match a.render {
            RenderKind::None => {}
            RenderKind::Surfaces => {
                let img = render_surface(&h.tensor)?;
                let path = a.common.out.join(surface_file_name(arch, h, a.format));
                std::fs::write(path, encode(&img, a.format)?)?;
                rendered += 1;
            }
            RenderKind::Sheet => kept.push(h.clone()),
        }
        Ok(())
    })?;
    std::io::Write::flush(&mut file)?;

    if a.render == RenderKind::Sheet {
        // Group by the indices the sheet does not tile over.
        let mut groups: BTreeMap<SurfaceIndex, Vec<Hypersurface<T>>> = BTreeMap::new();
        for h in kept {
            let mut key = h.index;
            match a.rm {
                Mode::Rm4 | Mode::Rm2 => key.s = None,
                Mode::Rm3 => {
                    key.j = None;
                    key.i = None;
                }
                Mode::Rm1 => key.i = None,
                Mode::Rm0 => key.k = None,
            }
            groups.entry(key).or_default().push(h);
        }
        for (key, group) in groups {
            let img = match a.rm {
                Mode::Rm4 | Mode::Rm2 => tile_strides(&group, ranges.grid)?,
                Mode::Rm3 => tile_channels(&group, ranges.in_channels, ranges.out_channels)?,
                Mode::Rm1 => class_grid(&group, ranges.out_channels)?,
                Mode::Rm0 => class_grid(&group, ranges.classes)?,
            };
            let path = a.common.out.join(sheet_file_name(arch, a.rm, a.layer, &key, a.format));
            write(&path, encode(&img, a.format)?)?;
            rendered += 1;
        }
    }
    println!(
        "{count} surfaces ({} {} of {arch}) written to {}; {rendered} images",
        a.rm,
        a.layer,
        archive_path.display()
    );
    Ok(true)
}
