//! OBJ and CSV export of immersion sheets, and the CSV reader.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::ImmersionSheet;
use crate::grid::GridSpec;
use crate::report::Report;
use crate::scalar::{to_f64, Real};
use crate::system::ResidualField;

/// Triangulated OBJ for `n = 2`: vertices are the unmasked nodes in
/// row-major order, two triangles per quad whose four corners are unmasked.
pub fn write_obj<T: Real, W: Write>(sheet: &ImmersionSheet<T>, mut out: W) -> Result<()> {
    let grid = &sheet.grid;
    if grid.dim() != 2 {
        return Err(Error::Unsupported(format!("OBJ export needs n = 2, got n = {}", grid.dim())));
    }
    let (m0, m1) = (grid.nodes[0], grid.nodes[1]);
    let mut index = vec![0usize; grid.len()];
    let mut next = 1;
    // row-major: the last axis varies fastest
    for i in 0..m0 {
        for j in 0..m1 {
            let node = grid.flat(&[i, j]);
            if sheet.mask[node] {
                continue;
            }
            let f = &sheet.f[node];
            let c: Vec<String> = f.iter().map(|v| format!("{}", to_f64(*v))).collect();
            writeln!(out, "v {}", c.join(" "))?;
            index[node] = next;
            next += 1;
        }
    }
    for i in 0..m0 - 1 {
        for j in 0..m1 - 1 {
            let q = [grid.flat(&[i, j]), grid.flat(&[i + 1, j]), grid.flat(&[i + 1, j + 1]), grid.flat(&[i, j + 1])];
            if q.iter().any(|&n| sheet.mask[n]) {
                continue;
            }
            writeln!(out, "f {} {} {}", index[q[0]], index[q[1]], index[q[2]])?;
            writeln!(out, "f {} {} {}", index[q[0]], index[q[2]], index[q[3]])?;
        }
    }
    Ok(())
}

pub fn export_obj<T: Real>(sheet: &ImmersionSheet<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_obj(sheet, &mut w)?;
    w.flush()?;
    Ok(())
}

/// CSV with columns `x0.., f0.., u0.., mask`, one row per node in flat order.
pub fn write_csv<T: Real, W: Write>(sheet: &ImmersionSheet<T>, mut out: W) -> Result<()> {
    let n = sheet.grid.dim();
    let mut header: Vec<String> = (0..n).map(|a| format!("x{a}")).collect();
    header.extend((0..sheet.f.first().map_or(0, |f| f.len())).map(|a| format!("f{a}")));
    header.extend((0..sheet.u.first().map_or(0, |u| u.len())).map(|a| format!("u{a}")));
    header.push("mask".into());
    writeln!(out, "{}", header.join(","))?;
    for node in 0..sheet.grid.len() {
        let mut row: Vec<String> = sheet.grid.coords(node).iter().map(|x| format!("{x:e}")).collect();
        row.extend(sheet.f[node].iter().map(|v| format!("{:e}", to_f64(*v))));
        row.extend(sheet.u[node].iter().map(|v| format!("{:e}", to_f64(*v))));
        row.push(if sheet.mask[node] { "1" } else { "0" }.into());
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn export_csv<T: Real>(sheet: &ImmersionSheet<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_csv(sheet, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Per-node residuals of a report as CSV: `x0.., residual`.
pub fn write_residual_csv<T: Real, W: Write>(grid: &GridSpec, field: &ResidualField<T>, mut out: W) -> Result<()> {
    let mut header: Vec<String> = (0..grid.dim()).map(|a| format!("x{a}")).collect();
    header.push("residual".into());
    writeln!(out, "{}", header.join(","))?;
    for (node, v) in field.values.iter().enumerate() {
        let mut row: Vec<String> = grid.coords(node).iter().map(|x| format!("{x:e}")).collect();
        row.push(format!("{:e}", to_f64(*v)));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Summary rows of several reports as CSV.
pub fn write_report_csv<W: Write>(reports: &[Report], mut out: W) -> Result<()> {
    writeln!(out, "name,max_residual,p50,p90,p99")?;
    for r in reports {
        let p = &r.per_node_percentiles;
        writeln!(out, "{},{:e},{:e},{:e},{:e}", r.name, r.max_residual, p.p50, p.p90, p.p99)?;
    }
    Ok(())
}

/// Rows of a sheet CSV read back.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvSheet {
    pub coords: Vec<Vec<f64>>,
    pub f: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
}

pub fn read_csv<R: BufRead>(input: R) -> Result<CsvSheet> {
    let mut lines = input.lines();
    let header = lines.next().ok_or(Error::Parse { line: 1, msg: "empty file".into() })??;
    let cols: Vec<&str> = header.split(',').collect();
    let count = |prefix: char| cols.iter().filter(|c| c.starts_with(prefix) && c[1..].parse::<usize>().is_ok()).count();
    let (nx, nf, nu) = (count('x'), count('f'), count('u'));
    if cols.last() != Some(&"mask") || nx + nf + nu + 1 != cols.len() {
        return Err(Error::Parse { line: 1, msg: format!("unexpected header `{header}`") });
    }
    let mut out = CsvSheet { coords: Vec::new(), f: Vec::new(), u: Vec::new(), mask: Vec::new() };
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse { line: i + 2, msg };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(bad(format!("expected {} fields, found {}", cols.len(), fields.len())));
        }
        let nums = fields[..cols.len() - 1]
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        out.coords.push(nums[..nx].to_vec());
        out.f.push(nums[nx..nx + nf].to_vec());
        out.u.push(nums[nx + nf..].to_vec());
        out.mask.push(match fields[cols.len() - 1].trim() {
            "0" => false,
            "1" => true,
            other => return Err(bad(format!("mask must be 0 or 1, found `{other}`"))),
        });
    }
    Ok(out)
}

pub fn load_csv(path: &Path) -> Result<CsvSheet> {
    read_csv(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::SystemShape;
    use nalgebra::{DMatrix, DVector};

    fn sheet(nodes: usize, masked: &[usize]) -> ImmersionSheet<f64> {
        let grid = GridSpec::cube(2, 1.0, nodes).unwrap();
        let len = grid.len();
        let f = (0..len).map(|i| {
            let x = grid.coords(i);
            DVector::from_vec(vec![x[0], x[1], (x[0] * 1.1).sin() / 3.0])
        });
        ImmersionSheet {
            shape: SystemShape::hypersurface(2, 1).unwrap(),
            f: f.collect(),
            u: vec![DVector::from_vec(vec![1.0, -1.0]); len],
            frame: vec![DMatrix::identity(3, 3); len],
            second_form: None,
            mask: (0..len).map(|i| masked.contains(&i)).collect(),
            grid,
        }
    }

    fn obj_counts(s: &ImmersionSheet<f64>) -> (usize, usize) {
        let mut buf = Vec::new();
        write_obj(s, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        (text.lines().filter(|l| l.starts_with("v ")).count(), text.lines().filter(|l| l.starts_with("f ")).count())
    }

    #[test]
    fn obj_counts_follow_the_mask() {
        // GridSpec needs at least 5 nodes per axis: 16 quads, 32 faces
        assert_eq!(obj_counts(&sheet(5, &[])), (25, 32));
        // the centre node touches 4 quads
        assert_eq!(obj_counts(&sheet(5, &[12])), (24, 24));
        // a corner touches 1
        assert_eq!(obj_counts(&sheet(5, &[0])), (24, 30));
    }

    #[test]
    fn obj_needs_two_dimensions() {
        let mut s = sheet(5, &[]);
        s.grid = GridSpec::cube(3, 1.0, 5).unwrap();
        assert!(matches!(write_obj(&s, Vec::new()), Err(Error::Unsupported(_))));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let s = sheet(7, &[3]);
        let mut buf = Vec::new();
        write_csv(&s, &mut buf).unwrap();
        let back = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.f.len(), s.grid.len());
        for i in 0..s.grid.len() {
            assert_eq!(back.f[i], s.f[i].as_slice());
            assert_eq!(back.coords[i], s.grid.coords(i));
        }
        assert!(back.mask[3] && !back.mask[4]);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let text = "x0,x1,f0,u0,mask\n0,0,1,1,0\n0,1,zz,1,0\n";
        assert!(matches!(read_csv(text.as_bytes()), Err(Error::Parse { line: 3, .. })));
    }
}
