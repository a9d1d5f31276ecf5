//! Binary little-endian PLY in the standard 3DGS vertex layout.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::splat::{sh_rest_len, GaussianSplat, SplatCloud, SplatError, SH_REST_LEN};

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("unsupported format `{0}` (only binary_little_endian 1.0 is accepted)")]
    Format(String),
    #[error("missing vertex property `{0}`")]
    MissingProperty(String),
    #[error("property `{name}` has type `{ty}`, expected float")]
    PropertyType { name: String, ty: String },
    #[error("payload truncated while reading property `{property}` of vertex {vertex}")]
    Truncated { property: String, vertex: usize },
    #[error("unsupported number of f_rest properties: {0}")]
    ShLayout(usize),
    #[error(transparent)]
    Splat(#[from] SplatError),
}

/// Vertex property names in emission order for a given SH degree.
pub fn property_names(sh_degree: u8) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..sh_rest_len(sh_degree)).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

/// The exact header `save_ply` emits.
pub fn header_string(vertex_count: usize, sh_degree: u8) -> String {
    let mut h = String::from("ply\nformat binary_little_endian 1.0\n");
    h.push_str(&format!("element vertex {vertex_count}\n"));
    for name in property_names(sh_degree) {
        h.push_str(&format!("property float {name}\n"));
    }
    h.push_str("end_header\n");
    h
}

pub fn save_ply(cloud: &SplatCloud, path: impl AsRef<Path>) -> Result<(), PlyError> {
    let file = fs::File::create(path)?;
    let mut w = io::BufWriter::new(file);
    write_ply(cloud, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_ply(cloud: &SplatCloud, w: &mut impl Write) -> Result<(), PlyError> {
    let degree = cloud.sh_degree();
    let rest = sh_rest_len(degree);
    w.write_all(header_string(cloud.len(), degree).as_bytes())?;
    let mut row = Vec::with_capacity(4 * (17 + rest));
    for s in &cloud.splats {
        row.clear();
        let mut put = |v: f32| row.extend_from_slice(&v.to_le_bytes());
        s.position.iter().copied().for_each(&mut put);
        [0.0f32; 3].into_iter().for_each(&mut put);
        s.color_dc.iter().copied().for_each(&mut put);
        s.sh_rest[..rest].iter().copied().for_each(&mut put);
        put(s.opacity);
        s.log_scale.iter().copied().for_each(&mut put);
        s.rotation.iter().copied().for_each(&mut put);
        w.write_all(&row)?;
    }
    Ok(())
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<SplatCloud, PlyError> {
    let bytes = fs::read(path)?;
    read_ply(&bytes)
}

struct Header {
    vertex_count: usize,
    properties: Vec<String>,
    payload_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, PlyError> {
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| PlyError::Header("no end_header line".into()))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| PlyError::Header("header is not valid UTF-8".into()))?;
    let mut lines = text.lines().map(str::trim_end);
    if lines.next() != Some("ply") {
        return Err(PlyError::Header("missing `ply` magic line".into()));
    }

    let mut vertex_count = None;
    let mut properties = Vec::new();
    let mut in_vertex = false;
    let mut seen_format = false;
    for line in lines {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", fmt, version] => {
                if *fmt != "binary_little_endian" || *version != "1.0" {
                    return Err(PlyError::Format(format!("{fmt} {version}")));
                }
                seen_format = true;
            }
            ["element", name, count] => {
                if vertex_count.is_some() {
                    // only the vertex element is read; it must come first
                    in_vertex = false;
                    continue;
                }
                if *name != "vertex" {
                    return Err(PlyError::Header(format!(
                        "first element is `{name}`, expected `vertex`"
                    )));
                }
                let n = count
                    .parse::<usize>()
                    .map_err(|_| PlyError::Header(format!("bad vertex count `{count}`")))?;
                vertex_count = Some(n);
                in_vertex = true;
            }
            ["property", "list", .., name] if in_vertex => {
                return Err(PlyError::PropertyType {
                    name: name.to_string(),
                    ty: "list".into(),
                });
            }
            ["property", ty, name] if in_vertex => {
                if *ty != "float" && *ty != "float32" {
                    return Err(PlyError::PropertyType {
                        name: name.to_string(),
                        ty: ty.to_string(),
                    });
                }
                properties.push(name.to_string());
            }
            ["property", ..] => {}
            _ => return Err(PlyError::Header(format!("unrecognized line `{line}`"))),
        }
    }
    if !seen_format {
        return Err(PlyError::Header("missing format line".into()));
    }
    let vertex_count = vertex_count.ok_or_else(|| PlyError::Header("missing vertex element".into()))?;
    Ok(Header {
        vertex_count,
        properties,
        payload_offset: end + END.len(),
    })
}

/// Parse a PLY file held in memory.
pub fn read_ply(bytes: &[u8]) -> Result<SplatCloud, PlyError> {
    let header = parse_header(bytes)?;
    let find = |name: &str| -> Result<usize, PlyError> {
        header
            .properties
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| PlyError::MissingProperty(name.to_string()))
    };

    let rest_count = header.properties.iter().filter(|p| p.starts_with("f_rest_")).count();
    let sh_degree = (0u8..=3)
        .find(|&d| sh_rest_len(d) == rest_count)
        .ok_or(PlyError::ShLayout(rest_count))?;

    let position = [find("x")?, find("y")?, find("z")?];
    let dc = [find("f_dc_0")?, find("f_dc_1")?, find("f_dc_2")?];
    let rest = (0..rest_count)
        .map(|i| find(&format!("f_rest_{i}")))
        .collect::<Result<Vec<_>, _>>()?;
    let opacity = find("opacity")?;
    let scale = [find("scale_0")?, find("scale_1")?, find("scale_2")?];
    let rot = [find("rot_0")?, find("rot_1")?, find("rot_2")?, find("rot_3")?];

    let stride = header.properties.len() * 4;
    let payload = &bytes[header.payload_offset..];
    let available = payload.len() / stride.max(1);
    if available < header.vertex_count {
        let vertex = available;
        let partial = (payload.len() - available * stride) / 4;
        return Err(PlyError::Truncated {
            property: header.properties[partial.min(header.properties.len() - 1)].clone(),
            vertex,
        });
    }

    let mut splats = Vec::with_capacity(header.vertex_count);
    for row in payload.chunks_exact(stride).take(header.vertex_count) {
        let get = |i: usize| f32::from_le_bytes(row[4 * i..4 * i + 4].try_into().unwrap());
        let mut sh_rest = [0.0f32; SH_REST_LEN];
        for (dst, &i) in sh_rest.iter_mut().zip(&rest) {
            *dst = get(i);
        }
        splats.push(GaussianSplat {
            position: position.map(get),
            opacity: get(opacity),
            log_scale: scale.map(get),
            rotation: rot.map(get),
            color_dc: dc.map(get),
            sh_rest,
        });
    }
    Ok(SplatCloud::new(splats, sh_degree)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_splat(seed: f32) -> GaussianSplat {
        let mut s = GaussianSplat {
            position: [seed, -seed, 2.0 * seed],
            opacity: 0.25 * seed,
            log_scale: [-1.0, -2.0, seed],
            rotation: [1.0, seed, 0.0, -0.5],
            color_dc: [0.1, 0.2, seed],
            ..Default::default()
        };
        for (i, v) in s.sh_rest.iter_mut().enumerate() {
            *v = seed * i as f32 * 0.01;
        }
        s
    }

    fn to_bytes(cloud: &SplatCloud) -> Vec<u8> {
        let mut buf = Vec::new();
        write_ply(cloud, &mut buf).unwrap();
        buf
    }

    #[test]
    fn empty_cloud_round_trip() {
        let cloud = SplatCloud::empty(3).unwrap();
        let bytes = to_bytes(&cloud);
        assert!(String::from_utf8_lossy(&bytes).contains("element vertex 0\n"));
        let back = read_ply(&bytes).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.sh_degree(), 3);
    }

    #[test]
    fn single_zero_vertex() {
        let s = GaussianSplat {
            rotation: [0.0; 4],
            ..Default::default()
        };
        let cloud = SplatCloud::new(vec![s], 3).unwrap();
        let back = read_ply(&to_bytes(&cloud)).unwrap();
        assert_eq!(back.len(), 1);
        let mut one = back.splats[0];
        one.rotation = [1.0, 0.0, 0.0, 0.0];
        let a = one.activate().unwrap();
        assert_eq!(a.opacity, 0.5);
        assert_eq!(a.scale, [1.0; 3]);
    }

    #[test]
    fn file_size_for_one_splat() {
        let cloud = SplatCloud::new(vec![sample_splat(1.0)], 3).unwrap();
        let bytes = to_bytes(&cloud);
        let header = header_string(1, 3);
        assert_eq!(bytes.len(), header.len() + 59 * 4 + 3 * 4);
        assert!(bytes.starts_with(header.as_bytes()));
    }

    #[test]
    fn normals_written_as_zero() {
        let cloud = SplatCloud::new(vec![sample_splat(3.0)], 3).unwrap();
        let bytes = to_bytes(&cloud);
        let payload = &bytes[header_string(1, 3).len()..];
        assert!(payload[12..24].iter().all(|&b| b == 0));
    }

    #[test]
    fn lower_degree_layout() {
        let mut s = sample_splat(2.0);
        s.sh_rest[9..].fill(0.0);
        let cloud = SplatCloud::new(vec![s], 1).unwrap();
        let bytes = to_bytes(&cloud);
        assert!(!String::from_utf8_lossy(&bytes).contains("f_rest_9"));
        assert_eq!(read_ply(&bytes).unwrap(), cloud);
    }

    #[test]
    fn rejects_ascii() {
        let text = "ply\nformat ascii 1.0\nelement vertex 0\nproperty float x\nend_header\n";
        assert!(matches!(read_ply(text.as_bytes()), Err(PlyError::Format(_))));
    }

    #[test]
    fn reports_missing_property() {
        let header = header_string(0, 0).replace("property float opacity\n", "");
        match read_ply(header.as_bytes()) {
            Err(PlyError::MissingProperty(name)) => assert_eq!(name, "opacity"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn reports_non_float_property() {
        let header = header_string(0, 0).replace("property float scale_1", "property double scale_1");
        match read_ply(header.as_bytes()) {
            Err(PlyError::PropertyType { name, ty }) => {
                assert_eq!(name, "scale_1");
                assert_eq!(ty, "double");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn reports_truncation_with_property_name() {
        let cloud = SplatCloud::new(vec![sample_splat(1.0), sample_splat(2.0)], 3).unwrap();
        let mut bytes = to_bytes(&cloud);
        // cut inside the second vertex, after x, y, z, nx
        let cut = header_string(2, 3).len() + 62 * 4 + 4 * 4 + 2;
        bytes.truncate(cut);
        match read_ply(&bytes) {
            Err(PlyError::Truncated { property, vertex }) => {
                assert_eq!(vertex, 1);
                assert_eq!(property, "ny");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn reports_malformed_header() {
        assert!(matches!(read_ply(b"not a ply"), Err(PlyError::Header(_))));
        assert!(matches!(
            read_ply(b"ply\nformat binary_little_endian 1.0\nend_header\n"),
            Err(PlyError::Header(_))
        ));
    }

    #[test]
    fn reordered_properties_accepted() {
        // field order in the file is irrelevant as long as the names resolve
        let mut names = property_names(0);
        names.swap(0, 2);
        let mut text = String::from("ply\nformat binary_little_endian 1.0\nelement vertex 1\n");
        for n in &names {
            text.push_str(&format!("property float {n}\n"));
        }
        text.push_str("end_header\n");
        let mut bytes = text.into_bytes();
        for i in 0..names.len() {
            bytes.extend_from_slice(&(i as f32).to_le_bytes());
        }
        let cloud = read_ply(&bytes).unwrap();
        assert_eq!(cloud.splats[0].position, [2.0, 1.0, 0.0]);
    }

    fn arb_splat() -> impl Strategy<Value = GaussianSplat> {
        let f = || any::<f32>().prop_filter("finite", |v| v.is_finite());
        (
            prop::array::uniform3(f()),
            f(),
            prop::array::uniform3(f()),
            prop::array::uniform4(f()),
            prop::array::uniform3(f()),
            prop::collection::vec(f(), SH_REST_LEN),
        )
            .prop_map(|(p, o, s, r, c, sh)| GaussianSplat {
                position: p,
                opacity: o,
                log_scale: s,
                rotation: r,
                color_dc: c,
                sh_rest: sh.try_into().unwrap(),
            })
    }

    proptest! {
        #[test]
        fn round_trip_bit_exact(splats in prop::collection::vec(arb_splat(), 0..20)) {
            let cloud = SplatCloud::new(splats, 3).unwrap();
            let bytes = to_bytes(&cloud);
            let back = read_ply(&bytes).unwrap();
            prop_assert_eq!(back.len(), cloud.len());
            for (a, b) in back.splats.iter().zip(&cloud.splats) {
                prop_assert_eq!(a.position.map(f32::to_bits), b.position.map(f32::to_bits));
                prop_assert_eq!(a.opacity.to_bits(), b.opacity.to_bits());
                prop_assert_eq!(a.log_scale.map(f32::to_bits), b.log_scale.map(f32::to_bits));
                prop_assert_eq!(a.rotation.map(f32::to_bits), b.rotation.map(f32::to_bits));
                prop_assert_eq!(a.color_dc.map(f32::to_bits), b.color_dc.map(f32::to_bits));
                prop_assert_eq!(a.sh_rest.map(f32::to_bits), b.sh_rest.map(f32::to_bits));
            }
            prop_assert_eq!(to_bytes(&back), bytes);
        }
    }
}
