//! Binary model records: GMM, total-variability, and PLDA files, each a
//! short header followed by IVMX sub-blocks.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::ivmx::{read_ivmx, write_ivmx};
use crate::error::{Error, Result};
use crate::gmm::GmmModel;
use crate::ivector::TotalVariabilityModel;
use crate::plda::{PldaModel, PostNormTransform};

fn read_u32<R: Read>(reader: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    reader
        .read_exact(&mut b)
        .map_err(|_| Error::Format(format!("truncated record: missing {what}")))?;
    Ok(u32::from_le_bytes(b))
}

fn check_header<R: Read>(reader: &mut R, magic: &[u8; 4], version: u8) -> Result<()> {
    let mut b = [0u8; 5];
    reader
        .read_exact(&mut b)
        .map_err(|_| Error::Format("truncated record header".into()))?;
    if &b[0..4] != magic {
        return Err(Error::Format(format!(
            "bad record magic: expected {:?}",
            std::str::from_utf8(magic).unwrap_or("?")
        )));
    }
    if b[4] != version {
        return Err(Error::Format(format!("unsupported record version {}", b[4])));
    }
    Ok(())
}

/// GMM record: "GMMR" v1, C, D, then weights (1 x C), means (C x D),
/// covariances stacked as (C*D) x D.
pub fn write_gmm<W: Write>(writer: &mut W, model: &GmmModel) -> Result<()> {
    let c = model.num_components();
    let d = model.dim();
    writer.write_all(b"GMMR")?;
    writer.write_all(&[1u8])?;
    writer.write_all(&(c as u32).to_le_bytes())?;
    writer.write_all(&(d as u32).to_le_bytes())?;
    let weights = model
        .weights()
        .to_owned()
        .into_shape_with_order((1, c))
        .expect("weights reshape");
    write_ivmx(writer, weights.view())?;
    write_ivmx(writer, model.means().view())?;
    let mut covs = Array2::zeros((c * d, d));
    for (ci, cov) in model.covariances().iter().enumerate() {
        covs.slice_mut(ndarray::s![ci * d..(ci + 1) * d, ..]).assign(cov);
    }
    write_ivmx(writer, covs.view())?;
    Ok(())
}

pub fn read_gmm<R: Read>(reader: &mut R) -> Result<GmmModel> {
    check_header(reader, b"GMMR", 1)?;
    let c = read_u32(reader, "component count")? as usize;
    let d = read_u32(reader, "feature dimension")? as usize;
    let weights = read_ivmx(reader)?;
    let means = read_ivmx(reader)?;
    let covs = read_ivmx(reader)?;
    if weights.dim() != (1, c) || means.dim() != (c, d) || covs.dim() != (c * d, d) {
        return Err(Error::Format("GMM record blocks disagree with header".into()));
    }
    // float32 storage perturbs the simplex; renormalize before validation.
    let mut w = weights.row(0).to_owned();
    let sum = w.sum();
    if sum <= 0.0 {
        return Err(Error::Format("GMM record has non-positive weight sum".into()));
    }
    w.mapv_inplace(|v| v / sum);
    let covariances = (0..c)
        .map(|ci| covs.slice(ndarray::s![ci * d..(ci + 1) * d, ..]).to_owned())
        .collect();
    GmmModel::new(w, means, covariances)
}

pub fn write_gmm_file(path: &Path, model: &GmmModel) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_gmm(&mut file, model)?;
    file.flush()?;
    Ok(())
}

pub fn read_gmm_file(path: &Path) -> Result<GmmModel> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    read_gmm(&mut file)
}

/// Total-variability record: "TVMX" v1, rank, embedded GMM record, then T
/// as (C*D) x R.
pub fn write_tv_file(path: &Path, model: &TotalVariabilityModel) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(b"TVMX")?;
    file.write_all(&[1u8])?;
    file.write_all(&(model.rank as u32).to_le_bytes())?;
    write_gmm(&mut file, &model.ubm)?;
    write_ivmx(&mut file, model.t.view())?;
    file.flush()?;
    Ok(())
}

pub fn read_tv_file(path: &Path) -> Result<TotalVariabilityModel> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    check_header(&mut file, b"TVMX", 1)?;
    let rank = read_u32(&mut file, "rank")? as usize;
    let ubm = read_gmm(&mut file)?;
    let t = read_ivmx(&mut file)?;
    TotalVariabilityModel::new(ubm, t, rank)
}

/// Raw PLDA record (training output): "PLDR" v1, dim, then m_all (1 x R),
/// B (R x R), W (R x R).
pub fn write_plda_file(path: &Path, model: &PldaModel) -> Result<()> {
    let r = model.dim();
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(b"PLDR")?;
    file.write_all(&[1u8])?;
    file.write_all(&(r as u32).to_le_bytes())?;
    let m = model
        .m_all
        .clone()
        .into_shape_with_order((1, r))
        .expect("mean reshape");
    write_ivmx(&mut file, m.view())?;
    write_ivmx(&mut file, model.b.view())?;
    write_ivmx(&mut file, model.w.view())?;
    file.flush()?;
    Ok(())
}

pub fn read_plda_file(path: &Path) -> Result<PldaModel> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    check_header(&mut file, b"PLDR", 1)?;
    let r = read_u32(&mut file, "dimension")? as usize;
    let m = read_ivmx(&mut file)?;
    let b = read_ivmx(&mut file)?;
    let w = read_ivmx(&mut file)?;
    if m.dim() != (1, r) || b.dim() != (r, r) || w.dim() != (r, r) {
        return Err(Error::Format("PLDA record blocks disagree with header".into()));
    }
    Ok(PldaModel {
        m_all: m.row(0).to_owned(),
        b,
        w,
    })
}

/// Post-normalization record (scoring input): "PLDN" v1, dim, rank, then
/// m_all (1 x R), A (R x R), psi (1 x R).
pub fn write_postnorm_file(
    path: &Path,
    transform: &PostNormTransform,
    m_all: &Array1<f64>,
) -> Result<()> {
    let r = transform.dim();
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(b"PLDN")?;
    file.write_all(&[1u8])?;
    file.write_all(&(r as u32).to_le_bytes())?;
    file.write_all(&(transform.rank as u32).to_le_bytes())?;
    let m = m_all.clone().into_shape_with_order((1, r)).expect("mean reshape");
    write_ivmx(&mut file, m.view())?;
    write_ivmx(&mut file, transform.a.view())?;
    let psi = transform.psi.clone().into_shape_with_order((1, r)).expect("psi reshape");
    write_ivmx(&mut file, psi.view())?;
    file.flush()?;
    Ok(())
}

pub fn read_postnorm_file(path: &Path) -> Result<(PostNormTransform, Array1<f64>)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    check_header(&mut file, b"PLDN", 1)?;
    let r = read_u32(&mut file, "dimension")? as usize;
    let rank = read_u32(&mut file, "rank")? as usize;
    let m = read_ivmx(&mut file)?;
    let a = read_ivmx(&mut file)?;
    let psi = read_ivmx(&mut file)?;
    if m.dim() != (1, r) || a.dim() != (r, r) || psi.dim() != (1, r) {
        return Err(Error::Format(
            "post-normalization record blocks disagree with header".into(),
        ));
    }
    Ok((
        PostNormTransform {
            a,
            psi: psi.row(0).to_owned(),
            rank,
        },
        m.row(0).to_owned(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_gmm() -> GmmModel {
        GmmModel::new(
            array![0.25, 0.75],
            array![[1.0, -2.0], [0.5, 3.0]],
            vec![array![[2.0, 0.5], [0.5, 1.0]], array![[1.5, 0.0], [0.0, 0.75]]],
        )
        .unwrap()
    }

    #[test]
    fn gmm_roundtrip_at_f32_precision() {
        let model = small_gmm();
        let mut buf = Vec::new();
        write_gmm(&mut buf, &model).unwrap();
        let back = read_gmm(&mut buf.as_slice()).unwrap();
        assert_eq!(back.num_components(), 2);
        assert_eq!(back.dim(), 2);
        for (a, b) in model.means().iter().zip(back.means().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((back.weights().sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tvmx");
        let model = TotalVariabilityModel::new(
            small_gmm(),
            Array2::from_shape_fn((4, 3), |(i, j)| (i as f64) * 0.5 - (j as f64) * 0.25),
            3,
        )
        .unwrap();
        write_tv_file(&path, &model).unwrap();
        let back = read_tv_file(&path).unwrap();
        assert_eq!(back.rank, 3);
        for (a, b) in model.t.iter().zip(back.t.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn plda_records_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let raw = PldaModel {
            m_all: array![0.5, -0.25],
            b: array![[2.0, 0.25], [0.25, 1.0]],
            w: array![[1.0, 0.0], [0.0, 0.5]],
        };
        let raw_path = dir.path().join("plda.pldr");
        write_plda_file(&raw_path, &raw).unwrap();
        let back = read_plda_file(&raw_path).unwrap();
        assert!((back.b[[0, 1]] - 0.25).abs() < 1e-7);

        let t = PostNormTransform {
            a: array![[1.0, 0.5], [0.0, 2.0]],
            psi: array![3.0, 0.5],
            rank: 1,
        };
        let pn_path = dir.path().join("plda.pldn");
        write_postnorm_file(&pn_path, &t, &raw.m_all).unwrap();
        let (t_back, m_back) = read_postnorm_file(&pn_path).unwrap();
        assert_eq!(t_back.rank, 1);
        assert!((t_back.a[[1, 1]] - 2.0).abs() < 1e-7);
        assert!((m_back[0] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let model = small_gmm();
        let mut buf = Vec::new();
        write_gmm(&mut buf, &model).unwrap();
        buf[0] = b'Z';
        assert!(matches!(read_gmm(&mut buf.as_slice()), Err(Error::Format(_))));
    }
}
