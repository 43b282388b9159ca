//! PASCAL VOC annotation XML (the `size` and `object/bndbox` subset).
//!
//! The `difficult` flag is ignored: every object becomes an instance.

use std::fs;
use std::path::Path;

use protodet_core::bbox::BBox;
use protodet_core::episode::{AnnotatedImage, ImageSource, Instance};
use protodet_core::graph::{AliasTable, CategorySet};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VocError {
    #[error("malformed XML: {0}")]
    Xml(String),
    #[error("missing element {0}")]
    Missing(String),
    #[error("{path}: expected an integer, found `{value}`")]
    Number { path: String, value: String },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("{path}: unknown category `{name}`")]
    Category { path: String, name: String },
}

fn child<'a, 'i>(node: roxmltree::Node<'a, 'i>, name: &str) -> Option<roxmltree::Node<'a, 'i>> {
    node.children().find(|c| c.has_tag_name(name))
}

fn text_at(node: roxmltree::Node, rel: &[&str], base: &str) -> Result<String, VocError> {
    let mut cur = node;
    let mut path = base.to_string();
    for part in rel {
        if !path.is_empty() {
            path.push('/');
        }
        path.push_str(part);
        cur = child(cur, part).ok_or_else(|| VocError::Missing(path.clone()))?;
    }
    let t = cur.text().map(str::trim).unwrap_or("");
    if t.is_empty() {
        return Err(VocError::Missing(path));
    }
    Ok(t.to_string())
}

fn int_at(node: roxmltree::Node, rel: &[&str], base: &str) -> Result<i64, VocError> {
    let t = text_at(node, rel, base)?;
    t.parse().map_err(|_| VocError::Number {
        path: format!("{base}/{}", rel.join("/")).trim_start_matches('/').to_string(),
        value: t,
    })
}

/// Parses one annotation document. Category names go through `aliases`
/// and must belong to `cats`.
pub fn parse_voc_annotation(xml: &str, aliases: &AliasTable, cats: &CategorySet) -> Result<AnnotatedImage, VocError> {
    let doc = roxmltree::Document::parse(xml).map_err(|e| VocError::Xml(e.to_string()))?;
    let root = doc.root_element();
    let id = child(root, "filename")
        .and_then(|n| n.text())
        .map(|t| t.trim().to_string())
        .unwrap_or_default();
    let width = int_at(root, &["size", "width"], "")?;
    let height = int_at(root, &["size", "height"], "")?;
    if width <= 0 || height <= 0 {
        return Err(VocError::Invalid {
            path: "size".into(),
            message: format!("non-positive image size {width}x{height}"),
        });
    }
    let mut instances = Vec::new();
    for (i, obj) in root.children().filter(|c| c.has_tag_name("object")).enumerate() {
        let base = format!("object[{i}]");
        let name = text_at(obj, &["name"], &base)?;
        let canonical = aliases.canonical_name(&name).map_err(|_| VocError::Category {
            path: format!("{base}/name"),
            name: name.clone(),
        })?;
        let category = cats.index_of(canonical).ok_or_else(|| VocError::Category {
            path: format!("{base}/name"),
            name: name.clone(),
        })?;
        let bb = format!("{base}/bndbox");
        let coords = ["xmin", "ymin", "xmax", "ymax"]
            .iter()
            .map(|k| int_at(obj, &["bndbox", k], &base))
            .collect::<Result<Vec<_>, _>>()?;
        let (x0, y0, x1, y1) = (coords[0], coords[1], coords[2], coords[3]);
        if x0 >= x1 {
            return Err(VocError::Invalid {
                path: bb,
                message: format!("xmin {x0} must be below xmax {x1}"),
            });
        }
        if y0 >= y1 {
            return Err(VocError::Invalid {
                path: bb,
                message: format!("ymin {y0} must be below ymax {y1}"),
            });
        }
        if x0 < 0 || y0 < 0 || x1 > width || y1 > height {
            return Err(VocError::Invalid {
                path: bb,
                message: format!("box ({x0},{y0},{x1},{y1}) outside image {width}x{height}"),
            });
        }
        let bbox = BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64).map_err(|e| VocError::Invalid {
            path: format!("{base}/bndbox"),
            message: e.to_string(),
        })?;
        instances.push(Instance { category, bbox });
    }
    AnnotatedImage::new(id, width as f64, height as f64, instances, ImageSource::VocXml).map_err(|e| {
        VocError::Invalid {
            path: "annotation".into(),
            message: e.to_string(),
        }
    })
}

/// Reads every `*.xml` file in `dir`, sorted by file name.
pub fn load_voc_dir(
    dir: &Path,
    aliases: &AliasTable,
    cats: &CategorySet,
) -> crate::error::AppResult<Vec<AnnotatedImage>> {
    use crate::error::AppError;
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| AppError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "xml"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| AppError::io(p, e))?;
            let mut img = parse_voc_annotation(&text, aliases, cats).map_err(|e| AppError::data(p, e.to_string()))?;
            if img.id.is_empty() {
                img.id = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
            }
            Ok(img)
        })
        .collect()
}
