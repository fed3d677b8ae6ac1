//! "IVFN" checkpoints: magic, u32 version, the spec as u32 fields, a u32
//! tensor count, then per tensor a u32 rank, u32 dims and f32 values, in
//! parameter declaration order. Little-endian throughout.

use std::path::Path;

use super::network::{Network, NetworkSpec, NetworkState, Param, Variant};
use crate::error::{Error, Result};
use crate::formats::{put_f32, put_u32, Reader, FORMAT_VERSION};

pub const MAGIC: &[u8; 4] = b"IVFN";

fn spec_fields(s: &NetworkSpec) -> [usize; 13] {
    [s.n_features, s.frames, s.datasets, s.n1, s.n2, s.n3, s.c1, s.c2, s.c3, s.dilation, s.f1, s.f2, s.n_classes]
}

pub fn encode(spec: &NetworkSpec, state: &NetworkState) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, spec.variant.code());
    for v in spec_fields(spec) {
        put_u32(&mut out, v as u32);
    }
    put_u32(&mut out, state.params.len() as u32);
    for p in &state.params {
        put_u32(&mut out, p.dims.len() as u32);
        for &d in &p.dims {
            put_u32(&mut out, d as u32);
        }
        for &v in &p.value {
            put_f32(&mut out, v);
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(Network, NetworkState)> {
    let mut r = Reader::new(bytes, path);
    r.header(MAGIC)?;
    let code = r.u32()?;
    let variant = Variant::from_code(code).ok_or_else(|| r.fail(format!("unknown variant code {code}")))?;
    let mut f = [0usize; 13];
    for v in &mut f {
        *v = r.u32()? as usize;
    }
    let spec = NetworkSpec {
        variant,
        n_features: f[0],
        frames: f[1],
        datasets: f[2],
        n1: f[3],
        n2: f[4],
        n3: f[5],
        c1: f[6],
        c2: f[7],
        c3: f[8],
        dilation: f[9],
        f1: f[10],
        f2: f[11],
        n_classes: f[12],
    };
    let net = Network::new(spec).map_err(|e| r.fail(format!("invalid spec: {e}")))?;
    let count = r.u32()? as usize;
    let expected = net.param_dims();
    if count != expected.len() {
        return Err(r.fail(format!("expected {} tensors, found {count}", expected.len())));
    }
    let names = net.param_names().into_iter().map(String::from).collect::<Vec<_>>();
    let mut params = Vec::with_capacity(count);
    for ((dims, trainable), name) in expected.into_iter().zip(names) {
        let rank = r.u32()? as usize;
        let mut got = Vec::with_capacity(rank);
        for _ in 0..rank {
            got.push(r.u32()? as usize);
        }
        if got != dims {
            return Err(r.fail(format!("tensor {name} has dims {got:?}, expected {dims:?}")));
        }
        let value = r.f32s(dims.iter().product())?.into_iter().map(f64::from).collect();
        params.push(Param { name, dims, value, trainable });
    }
    r.finish()?;
    let state = net.state_from_params(params);
    Ok((net, state))
}

pub fn save(path: &Path, spec: &NetworkSpec, state: &NetworkState) -> Result<()> {
    std::fs::write(path, encode(spec, state))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Network, NetworkState)> {
    let bytes = std::fs::read(path)?;
    decode(&bytes, path).map_err(|e| match e {
        Error::BadFormat { .. } => e,
        other => Error::BadFormat { path: path.to_path_buf(), reason: other.to_string() },
    })
}
