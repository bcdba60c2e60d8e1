//! Binary checkpoint container: embeddings, optimizer state, and the
//! config/dataset hashes that gate compatibility at evaluation time.
//!
//! Layout: magic `STCP`, u32 LE version, two length-prefixed hash strings,
//! u64 LE num_users / num_items / d / best_epoch, f64 LE best metric, then
//! the f64 LE payloads: user embeddings, item embeddings, optimizer step
//! and the four moment matrices.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::init::EmbeddingTable;
use crate::mat::Mat;
use crate::training::AdamWState;

const MAGIC: &[u8; 4] = b"STCP";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: String,
    pub dataset_hash: String,
    pub best_epoch: u64,
    pub best_valid_ndcg20: f64,
    pub embeddings: EmbeddingTable,
    pub optimizer: AdamWState,
}

fn write_mat(w: &mut impl Write, m: &Mat) -> std::io::Result<()> {
    for v in m.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_mat(r: &mut impl Read, rows: usize, cols: usize) -> std::io::Result<Mat> {
    let mut data = vec![0.0f64; rows * cols];
    let mut buf = [0u8; 8];
    for v in &mut data {
        r.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    Ok(Mat::from_vec(rows, cols, data).expect("sized buffer"))
}

fn write_string(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_string(r: &mut impl Read) -> std::io::Result<String> {
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let len = u32::from_le_bytes(b4) as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(String::from_utf8_lossy(&buf).into_owned())
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        let users = &self.embeddings.users;
        let items = &self.embeddings.items;
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        write_string(&mut w, &self.config_hash).map_err(io)?;
        write_string(&mut w, &self.dataset_hash).map_err(io)?;
        w.write_all(&(users.rows() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&(items.rows() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&(users.cols() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&self.best_epoch.to_le_bytes()).map_err(io)?;
        w.write_all(&self.best_valid_ndcg20.to_le_bytes()).map_err(io)?;
        write_mat(&mut w, users).map_err(io)?;
        write_mat(&mut w, items).map_err(io)?;
        w.write_all(&self.optimizer.step.to_le_bytes()).map_err(io)?;
        write_mat(&mut w, &self.optimizer.m_users).map_err(io)?;
        write_mat(&mut w, &self.optimizer.v_users).map_err(io)?;
        write_mat(&mut w, &self.optimizer.m_items).map_err(io)?;
        write_mat(&mut w, &self.optimizer.v_items).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::format(path, "bad magic, expected STCP"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(io)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(Error::format(
                path,
                format!("unsupported version {version}, expected {VERSION}"),
            ));
        }
        let config_hash = read_string(&mut r).map_err(io)?;
        let dataset_hash = read_string(&mut r).map_err(io)?;
        let mut b8 = [0u8; 8];
        let mut read_u64 = |r: &mut BufReader<File>| -> Result<u64> {
            r.read_exact(&mut b8).map_err(|e| Error::io(path, e))?;
            Ok(u64::from_le_bytes(b8))
        };
        let num_users = read_u64(&mut r)? as usize;
        let num_items = read_u64(&mut r)? as usize;
        let d = read_u64(&mut r)? as usize;
        let best_epoch = read_u64(&mut r)?;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(io)?;
        let best_valid_ndcg20 = f64::from_le_bytes(b8);
        let users = read_mat(&mut r, num_users, d).map_err(io)?;
        let items = read_mat(&mut r, num_items, d).map_err(io)?;
        r.read_exact(&mut b8).map_err(io)?;
        let step = u64::from_le_bytes(b8);
        let m_users = read_mat(&mut r, num_users, d).map_err(io)?;
        let v_users = read_mat(&mut r, num_users, d).map_err(io)?;
        let m_items = read_mat(&mut r, num_items, d).map_err(io)?;
        let v_items = read_mat(&mut r, num_items, d).map_err(io)?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(io)? != 0 {
            return Err(Error::format(path, "trailing bytes after payload"));
        }
        let mut optimizer = AdamWState::new(num_users, num_items, d);
        optimizer.step = step;
        optimizer.m_users = m_users;
        optimizer.v_users = v_users;
        optimizer.m_items = m_items;
        optimizer.v_items = v_items;
        Ok(Checkpoint {
            config_hash,
            dataset_hash,
            best_epoch,
            best_valid_ndcg20,
            embeddings: EmbeddingTable { users, items },
            optimizer,
        })
    }
}
