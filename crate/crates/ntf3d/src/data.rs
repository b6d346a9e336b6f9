//! Procedural captioned-shape dataset and curation.
//!
//! Eight revolve-based primitives crossed with six named colors and an
//! optional size word give 144 captioned objects. Every mesh is
//! normalized to a 0.8 bounding box, rendered from 8 random poses, and
//! surface-sampled into a labeled point cloud. Curation scores meshes by
//! the mean one-ring Laplacian magnitude.
//!
//! ```
//! use ntf3d::data::{curate, CURATION_BAND};
//! use ntf3d::mesh::{icosphere, normalize_bbox, TexturedMesh};
//!
//! let (v, f) = icosphere(2);
//! let mesh = TexturedMesh { colors: vec![[0.5; 3]; v.len()], vertices: v, faces: f };
//! let report = curate(0, &normalize_bbox(&mesh, 0.8), CURATION_BAND).unwrap();
//! assert!(report.accepted);
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mesh::{normalize_bbox, sample_surface, LabeledPointCloud, TexturedMesh};
use crate::render::{render, sample_camera, RenderOpts, RenderedView};

pub const BBOX_TARGET: f64 = 0.8;
pub const VIEWS_PER_OBJECT: usize = 8;
/// Curation band on the mean Laplacian magnitude.
pub const CURATION_BAND: (f64, f64) = (1e-6, 1e-1);

pub const DEFAULT_SHAPES: [&str; 8] = [
    "sphere", "box", "cylinder", "cone", "torus", "ellipsoid", "pyramid", "capsule",
];
pub const DEFAULT_SIZES: [Option<&str>; 3] = [None, Some("small"), Some("large")];

/// Named color anchors shared by dataset painting and the hue probe.
pub const COLOR_ANCHORS: [(&str, [f64; 3]); 6] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.1]),
    ("blue", [0.1, 0.2, 0.9]),
    ("yellow", [0.9, 0.85, 0.1]),
    ("magenta", [0.9, 0.1, 0.9]),
    ("cyan", [0.1, 0.85, 0.9]),
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attributes {
    pub shape: String,
    pub color: String,
    pub size: Option<String>,
}

impl Attributes {
    pub fn caption(&self) -> String {
        match &self.size {
            Some(s) => format!("a {s} {} {}", self.color, self.shape),
            None => format!("a {} {}", self.color, self.shape),
        }
    }

    /// Descriptive attributes beyond the bare shape noun.
    pub fn attribute_count(&self) -> usize {
        1 + self.size.is_some() as usize
    }
}

#[derive(Clone, Debug)]
pub struct CaptionedObject {
    pub id: u64,
    pub mesh: TexturedMesh,
    pub caption: String,
    pub attributes: Attributes,
    pub views: Vec<RenderedView>,
    pub cloud: LabeledPointCloud,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CurationReport {
    pub object_id: u64,
    pub mean_delta: f64,
    pub accepted: bool,
    pub rejection_reason: Option<String>,
}

// ---------------------------------------------------------------------
// primitive construction

/// Triangulate a surface of revolution around z. `profile` runs bottom
/// to top as (radius, z) pairs; radius 0 at an end collapses that ring
/// to an apex, a positive end radius gets a center-vertex cap fan.
/// `closed` treats the profile as a loop (torus) with no caps.
fn revolve(profile: &[(f64, f64)], nseg: usize, closed: bool) -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
    assert!(nseg >= 3 && profile.len() >= 2);
    let mut verts: Vec<[f64; 3]> = Vec::new();
    // ring_ids[i] = vertex ids of profile row i (len nseg, or 1 for apex)
    let mut ring_ids: Vec<Vec<usize>> = Vec::new();
    for &(r, z) in profile {
        if r.abs() < 1e-12 && !closed {
            ring_ids.push(vec![verts.len()]);
            verts.push([0.0, 0.0, z]);
        } else {
            let mut ids = Vec::with_capacity(nseg);
            for k in 0..nseg {
                let a = std::f64::consts::TAU * k as f64 / nseg as f64;
                ids.push(verts.len());
                verts.push([r * a.cos(), r * a.sin(), z]);
            }
            ring_ids.push(ids);
        }
    }
    let mut faces: Vec<[usize; 3]> = Vec::new();
    let rows = profile.len();
    let bands = if closed { rows } else { rows - 1 };
    for i in 0..bands {
        let lo = &ring_ids[i];
        let hi = &ring_ids[(i + 1) % rows];
        for k in 0..nseg {
            let k1 = (k + 1) % nseg;
            match (lo.len(), hi.len()) {
                (1, _) => faces.push([lo[0], hi[k], hi[k1]]),
                (_, 1) => faces.push([lo[k], hi[0], lo[k1]]),
                _ => {
                    faces.push([lo[k], hi[k], lo[k1]]);
                    faces.push([lo[k1], hi[k], hi[k1]]);
                }
            }
        }
    }
    if !closed {
        // cap fans on open positive-radius ends
        for (i, flip) in [(0usize, true), (rows - 1, false)] {
            let ring = &ring_ids[i];
            if ring.len() == 1 {
                continue;
            }
            let z = profile[i].1;
            let center = verts.len();
            verts.push([0.0, 0.0, z]);
            for k in 0..nseg {
                let k1 = (k + 1) % nseg;
                if flip {
                    faces.push([center, ring[k1], ring[k]]);
                } else {
                    faces.push([center, ring[k], ring[k1]]);
                }
            }
        }
    }
    (verts, faces)
}

fn arc_profile(n: usize, f: impl Fn(f64) -> (f64, f64)) -> Vec<(f64, f64)> {
    (0..=n).map(|i| f(i as f64 / n as f64)).collect()
}

/// Split every triangle into four at edge midpoints (no reprojection),
/// refining flat-faced primitives so their mean Laplacian magnitude
/// lands inside the curation band.
fn subdivide_midpoint(
    verts: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
    levels: usize,
) -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
    let (mut verts, mut faces) = (verts, faces);
    for _ in 0..levels {
        let mut cache: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = [0usize; 3];
            for (k, (a, b)) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])].into_iter().enumerate() {
                let key = (a.min(b), a.max(b));
                mid[k] = *cache.entry(key).or_insert_with(|| {
                    verts.push([
                        (verts[a][0] + verts[b][0]) / 2.0,
                        (verts[a][1] + verts[b][1]) / 2.0,
                        (verts[a][2] + verts[b][2]) / 2.0,
                    ]);
                    verts.len() - 1
                });
            }
            next.push([f[0], mid[0], mid[2]]);
            next.push([mid[0], f[1], mid[1]]);
            next.push([mid[2], mid[1], f[2]]);
            next.push([mid[0], mid[1], mid[2]]);
        }
        faces = next;
    }
    (verts, faces)
}

/// Build one of the eight named primitives (unnormalized scale).
pub fn primitive(shape: &str) -> Result<(Vec<[f64; 3]>, Vec<[usize; 3]>)> {
    use std::f64::consts::{FRAC_PI_2, PI};
    Ok(match shape {
        "sphere" => {
            let p = arc_profile(12, |u| ((PI * u).sin(), -(PI * u).cos()));
            revolve(&p, 24, false)
        }
        "ellipsoid" => {
            let p = arc_profile(12, |u| ((PI * u).sin() * 0.55, -(PI * u).cos()));
            revolve(&p, 24, false)
        }
        "box" => {
            let p = arc_profile(4, |u| (1.0, -1.0 + 2.0 * u));
            let (v, f) = revolve(&p, 4, false);
            subdivide_midpoint(v, f, 2)
        }
        "pyramid" => {
            let p = arc_profile(4, |u| (1.0 - u, -0.5 + u));
            let (v, f) = revolve(&p, 4, false);
            subdivide_midpoint(v, f, 2)
        }
        "cylinder" => {
            let p = arc_profile(4, |u| (0.6, -0.8 + 1.6 * u));
            revolve(&p, 24, false)
        }
        "cone" => {
            let p = arc_profile(5, |u| (0.7 * (1.0 - u), -0.6 + 1.2 * u));
            revolve(&p, 24, false)
        }
        "torus" => {
            let (big, small) = (0.55, 0.22);
            let p: Vec<(f64, f64)> = (0..12)
                .map(|i| {
                    let a = std::f64::consts::TAU * i as f64 / 12.0;
                    (big + small * a.cos(), small * a.sin())
                })
                .collect();
            revolve(&p, 24, true)
        }
        "capsule" => {
            let h = 0.55;
            let mut p = arc_profile(6, |u| {
                let a = -FRAC_PI_2 + FRAC_PI_2 * u;
                (a.cos() * 0.5, -h + a.sin() * 0.5)
            });
            p.extend(arc_profile(6, |u| {
                let a = FRAC_PI_2 * u;
                (a.cos() * 0.5, h + a.sin() * 0.5)
            }));
            revolve(&p, 24, false)
        }
        other => return Err(Error::Config(format!("unknown shape '{other}'"))),
    })
}

pub fn color_anchor(name: &str) -> Result<[f64; 3]> {
    COLOR_ANCHORS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, c)| *c)
        .ok_or_else(|| Error::Config(format!("unknown color '{name}'")))
}

/// Construct the cross-product dataset. Captions follow the template
/// "a {size} {color} {shape}" with the size word omitted when absent.
pub fn make_dataset<R: Rng>(
    shapes: &[&str],
    colors: &[&str],
    sizes: &[Option<&str>],
    n_points: usize,
    opts: &RenderOpts,
    rng: &mut R,
) -> Result<Vec<CaptionedObject>> {
    if shapes.is_empty() || colors.is_empty() || sizes.is_empty() {
        return Err(Error::Config("empty attribute list".into()));
    }
    let mut out = Vec::new();
    let mut id = 0u64;
    for shape in shapes {
        for color in colors {
            for size in sizes {
                let attributes = Attributes {
                    shape: shape.to_string(),
                    color: color.to_string(),
                    size: size.map(str::to_string),
                };
                let caption = attributes.caption();
                let (vertices, faces) = primitive(shape)?;
                let anchor = color_anchor(color)?;
                let colors_v: Vec<[f64; 3]> = (0..vertices.len())
                    .map(|_| {
                        let mut c = anchor;
                        for x in &mut c {
                            *x = (*x * (1.0 + (rng.gen::<f64>() - 0.5) * 0.1)).clamp(0.0, 1.0);
                        }
                        c
                    })
                    .collect();
                let mesh = normalize_bbox(
                    &TexturedMesh { vertices, faces, colors: colors_v },
                    BBOX_TARGET,
                );
                let views: Vec<RenderedView> = (0..VIEWS_PER_OBJECT)
                    .map(|_| {
                        let cam = sample_camera(rng);
                        render(&mesh, &cam, opts, rng.gen(), id)
                    })
                    .collect::<Result<_>>()?;
                let (points, pcolors) = sample_surface(&mesh, n_points, rng)?;
                let cloud = LabeledPointCloud {
                    points,
                    colors: pcolors,
                    text: Vec::new(),
                    caption_id: id,
                };
                out.push(CaptionedObject { id, mesh, caption, attributes, views, cloud });
                id += 1;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// curation

/// Per-vertex one-ring Laplacian magnitude |v_i - mean(neighbors)|.
pub fn laplacian_delta(mesh: &TexturedMesh) -> Result<Vec<f64>> {
    let mut rings: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); mesh.vertices.len()];
    for f in &mesh.faces {
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            rings[a].insert(b);
            rings[b].insert(a);
        }
    }
    rings
        .iter()
        .enumerate()
        .map(|(i, ring)| {
            if ring.is_empty() {
                return Err(Error::InvalidInput(format!("vertex {i} has no neighbors")));
            }
            let mut c = [0.0f64; 3];
            for &j in ring {
                for k in 0..3 {
                    c[k] += mesh.vertices[j][k];
                }
            }
            let n = ring.len() as f64;
            let v = &mesh.vertices[i];
            let d = [v[0] - c[0] / n, v[1] - c[1] / n, v[2] - c[2] / n];
            Ok((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt())
        })
        .collect()
}

fn connected_components(mesh: &TexturedMesh) -> usize {
    let n = mesh.vertices.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut Vec<usize>, mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for f in &mesh.faces {
        let a = find(&mut parent, f[0]);
        let b = find(&mut parent, f[1]);
        let c = find(&mut parent, f[2]);
        parent[b] = a;
        parent[c] = a;
    }
    (0..n).map(|i| find(&mut parent, i)).collect::<BTreeSet<_>>().len()
}

/// Score a mesh against the curation band; multi-component meshes are
/// rejected regardless of smoothness.
pub fn curate(object_id: u64, mesh: &TexturedMesh, band: (f64, f64)) -> Result<CurationReport> {
    let deltas = laplacian_delta(mesh)?;
    let mean_delta = deltas.iter().sum::<f64>() / deltas.len() as f64;
    let (lo, hi) = band;
    let rejection_reason = if connected_components(mesh) > 1 {
        Some("multiple connected components".to_string())
    } else if mean_delta < lo {
        Some(format!("too flat: mean delta {mean_delta:.3e} < {lo:.1e}"))
    } else if mean_delta > hi {
        Some(format!("too rough: mean delta {mean_delta:.3e} > {hi:.1e}"))
    } else {
        None
    };
    Ok(CurationReport {
        object_id,
        mean_delta,
        accepted: rejection_reason.is_none(),
        rejection_reason,
    })
}

// ---------------------------------------------------------------------
// on-disk formats

/// ASCII OFF-style mesh with per-vertex colors:
/// header `NTFOFF`, counts line, vertex lines `x y z r g b`, face lines
/// `3 i j k`.
pub fn write_mesh(path: &Path, mesh: &TexturedMesh) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "NTFOFF")?;
    writeln!(w, "{} {}", mesh.vertices.len(), mesh.faces.len())?;
    for (v, c) in mesh.vertices.iter().zip(&mesh.colors) {
        writeln!(w, "{:.17e} {:.17e} {:.17e} {:.6} {:.6} {:.6}", v[0], v[1], v[2], c[0], c[1], c[2])?;
    }
    for f in &mesh.faces {
        writeln!(w, "3 {} {} {}", f[0], f[1], f[2])?;
    }
    Ok(())
}

pub fn read_mesh(path: &Path) -> Result<TexturedMesh> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let bad = |m: &str| Error::InvalidInput(format!("{}: {m}", path.display()));
    let header = lines.next().transpose()?.ok_or_else(|| bad("empty file"))?;
    if header.trim() != "NTFOFF" {
        return Err(bad("missing NTFOFF header"));
    }
    let counts = lines.next().transpose()?.ok_or_else(|| bad("missing counts"))?;
    let mut it = counts.split_whitespace();
    let nv: usize = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad counts"))?;
    let nf: usize = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad counts"))?;
    let mut vertices = Vec::with_capacity(nv);
    let mut colors = Vec::with_capacity(nv);
    for _ in 0..nv {
        let line = lines.next().transpose()?.ok_or_else(|| bad("truncated vertices"))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad vertex line"))?;
        if vals.len() != 6 {
            return Err(bad("bad vertex line"));
        }
        vertices.push([vals[0], vals[1], vals[2]]);
        colors.push([vals[3], vals[4], vals[5]]);
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let line = lines.next().transpose()?.ok_or_else(|| bad("truncated faces"))?;
        let vals: Vec<usize> = line
            .split_whitespace()
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad face line"))?;
        if vals.len() != 4 || vals[0] != 3 || vals[1..].iter().any(|&i| i >= nv) {
            return Err(bad("bad face line"));
        }
        faces.push([vals[1], vals[2], vals[3]]);
    }
    Ok(TexturedMesh { vertices, faces, colors })
}

/// Binary little-endian fp32, N rows of [x y z r g b].
pub fn write_cloud(path: &Path, cloud: &LabeledPointCloud) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for (p, c) in cloud.points.iter().zip(&cloud.colors) {
        for x in p.iter().chain(c.iter()) {
            w.write_all(&(*x as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_cloud(path: &Path, caption_id: u64) -> Result<LabeledPointCloud> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() % 24 != 0 {
        return Err(Error::InvalidInput(format!(
            "{}: length {} is not a multiple of 24",
            path.display(),
            buf.len()
        )));
    }
    let mut points = Vec::new();
    let mut colors = Vec::new();
    for row in buf.chunks(24) {
        let f = |k: usize| f32::from_le_bytes(row[4 * k..4 * k + 4].try_into().unwrap()) as f64;
        points.push([f(0), f(1), f(2)]);
        colors.push([f(3), f(4), f(5)]);
    }
    Ok(LabeledPointCloud { points, colors, text: Vec::new(), caption_id })
}

/// Dump one view as an 8-bit RGB PNG plus a grayscale mask PNG.
pub fn write_view_png(rgb_path: &Path, mask_path: &Path, view: &RenderedView) -> Result<()> {
    let res = view.resolution as u32;
    let to8 = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    let rgb: Vec<u8> = view.rgb.iter().map(|&x| to8(x)).collect();
    let mask: Vec<u8> = view.silhouette.iter().map(|&x| to8(x)).collect();
    let save = |path: &Path, data: Vec<u8>, color: image::ColorType| {
        image::save_buffer(path, &data, res, res, color)
            .map_err(|e| Error::Io(std::io::Error::other(e)))
    };
    save(rgb_path, rgb, image::ColorType::Rgb8)?;
    save(mask_path, mask, image::ColorType::L8)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: u64,
    pub caption: String,
    pub attributes: Attributes,
    pub mesh_path: String,
    pub view_paths: Vec<String>,
    pub cameras: Vec<crate::render::CameraPose>,
    pub cloud_path: String,
}

/// Write meshes, clouds, view images, and a line-delimited JSON manifest
/// under `dir`. Returns the manifest path.
pub fn write_dataset(dir: &Path, objects: &[CaptionedObject]) -> Result<std::path::PathBuf> {
    for sub in ["meshes", "clouds", "views"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    let manifest_path = dir.join("manifest.jsonl");
    let mut w = BufWriter::new(std::fs::File::create(&manifest_path)?);
    for obj in objects {
        let mesh_rel = format!("meshes/{:03}.off", obj.id);
        let cloud_rel = format!("clouds/{:03}.bin", obj.id);
        write_mesh(&dir.join(&mesh_rel), &obj.mesh)?;
        write_cloud(&dir.join(&cloud_rel), &obj.cloud)?;
        let mut view_paths = Vec::new();
        for (k, v) in obj.views.iter().enumerate() {
            let rgb_rel = format!("views/{:03}_{k}.png", obj.id);
            let mask_rel = format!("views/{:03}_{k}_mask.png", obj.id);
            write_view_png(&dir.join(&rgb_rel), &dir.join(&mask_rel), v)?;
            view_paths.push(rgb_rel);
        }
        let rec = ManifestRecord {
            id: obj.id,
            caption: obj.caption.clone(),
            attributes: obj.attributes.clone(),
            mesh_path: mesh_rel,
            view_paths,
            cameras: obj.views.iter().map(|v| v.camera).collect(),
            cloud_path: cloud_rel,
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        writeln!(w)?;
    }
    Ok(manifest_path)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = std::fs::File::open(path)?;
    std::io::BufReader::new(file)
        .lines()
        .map(|line| {
            let line = line?;
            serde_json::from_str(&line)
                .map_err(|e| Error::InvalidInput(format!("bad manifest line: {e}")))
        })
        .collect()
}

/// Group caption ids by descriptive-attribute count.
pub fn group_by_attribute_count(objects: &[CaptionedObject]) -> BTreeMap<usize, Vec<u64>> {
    let mut map: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for o in objects {
        map.entry(o.attributes.attribute_count()).or_default().push(o.id);
    }
    map
}
