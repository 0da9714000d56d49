//! Network presets, ablation variants and their text form.

use std::fmt;
use std::str::FromStr;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::pose::{GridGeometry, Joint, RootSet, N_JOINTS};
use crate::tensor::conv_output_size;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::Config(format!("unknown preset `{s}` (desk, paper)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Baseline,
    MultiReg,
    TwoDCls,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::MultiReg, Variant::TwoDCls, Variant::Full];

    pub fn multi_root(self) -> bool {
        matches!(self, Variant::MultiReg | Variant::Full)
    }

    pub fn injects_probs(self) -> bool {
        matches!(self, Variant::TwoDCls | Variant::Full)
    }

    /// Row label in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::MultiReg => "Multi-reg",
            Variant::TwoDCls => "2D-cls",
            Variant::Full => "Multi-reg+2D-cls",
        }
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Variant> {
        Variant::ALL.get(id as usize).copied()
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "multi-reg" => Ok(Variant::MultiReg),
            "2d-cls" => Ok(Variant::TwoDCls),
            "full" => Ok(Variant::Full),
            _ => Err(Error::Config(format!(
                "unknown variant `{s}` (baseline, multi-reg, 2d-cls, full)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::MultiReg => "multi-reg",
            Variant::TwoDCls => "2d-cls",
            Variant::Full => "full",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
}

/// Conv layers after which a pool is applied (0-based).
pub const POOL_AFTER: [usize; 3] = [0, 1, 4];

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub preset: Preset,
    pub input_size: usize,
    pub convs: [ConvSpec; 5],
    pub pools: [PoolSpec; 3],
    pub fc1_2d: usize,
    pub fc1_3d: usize,
    pub fc_probs_2d: usize,
    /// Hidden width of each per-root head.
    pub fc2_3d: usize,
    /// `N_g`: grid cells per side.
    pub grid_cells: usize,
    /// Roots used by the multi-root variants.
    pub roots: RootSet,
    pub dropout: f64,
}

const fn conv(filters: usize, kernel: usize, stride: usize, pad: usize) -> ConvSpec {
    ConvSpec { filters, kernel, stride, pad }
}

const POOL: PoolSpec = PoolSpec { kernel: 3, stride: 2 };

impl NetworkConfig {
    pub fn desk() -> Self {
        NetworkConfig {
            preset: Preset::Desk,
            input_size: 64,
            convs: [conv(32, 7, 2, 0), conv(64, 5, 1, 2), conv(96, 3, 1, 1), conv(96, 3, 1, 1), conv(64, 3, 1, 1)],
            pools: [POOL; 3],
            fc1_2d: 1024,
            fc1_3d: 512,
            fc_probs_2d: 128,
            fc2_3d: 256,
            grid_cells: 8,
            roots: RootSet::default_six(),
            dropout: 0.3,
        }
    }

    pub fn paper() -> Self {
        NetworkConfig {
            preset: Preset::Paper,
            input_size: 225,
            convs: [conv(64, 7, 2, 0), conv(128, 5, 2, 2), conv(192, 3, 1, 1), conv(192, 3, 1, 1), conv(128, 3, 1, 1)],
            pools: [POOL; 3],
            fc1_2d: 2048,
            fc1_3d: 1024,
            fc_probs_2d: 256,
            fc2_3d: 512,
            grid_cells: 16,
            roots: RootSet::default_six(),
            dropout: 0.3,
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    /// Spatial size after every conv and pool stage, in order.
    pub fn spatial_sizes(&self) -> Result<Vec<usize>> {
        let mut s = self.input_size;
        let mut out = Vec::new();
        let mut pools = self.pools.iter();
        for (i, c) in self.convs.iter().enumerate() {
            s = conv_output_size(s, c.kernel, c.stride, c.pad)
                .map_err(|e| Error::Config(format!("conv{}: {e}", i + 1)))?;
            out.push(s);
            if POOL_AFTER.contains(&i) {
                let p = pools.next().expect("three pools");
                s = conv_output_size(s, p.kernel, p.stride, 0)
                    .map_err(|e| Error::Config(format!("pool after conv{}: {e}", i + 1)))?;
                out.push(s);
            }
        }
        Ok(out)
    }

    pub fn feature_dim(&self) -> Result<usize> {
        let s = *self.spatial_sizes()?.last().unwrap();
        Ok(s * s * self.convs[4].filters)
    }

    pub fn grid(&self) -> Result<GridGeometry> {
        GridGeometry::new(self.grid_cells, self.input_size)
    }

    pub fn grid_classes(&self) -> usize {
        self.grid_cells * self.grid_cells
    }

    /// Width of the 2D output layer, `N_g² · N_j`.
    pub fn fc2_2d(&self) -> usize {
        self.grid_classes() * N_JOINTS
    }

    /// Input width of each root head.
    pub fn fc_2d3d(&self, variant: Variant) -> usize {
        self.fc1_3d + if variant.injects_probs() { self.fc_probs_2d } else { 0 }
    }

    pub fn roots_for(&self, variant: Variant) -> RootSet {
        if variant.multi_root() {
            self.roots.clone()
        } else {
            RootSet::single()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.convs.iter().enumerate() {
            if c.filters == 0 || c.kernel == 0 || c.stride == 0 {
                return Err(Error::Config(format!("conv{}: filters, kernel and stride must be positive", i + 1)));
            }
        }
        for (i, p) in self.pools.iter().enumerate() {
            if p.kernel == 0 || p.stride == 0 {
                return Err(Error::Config(format!("pool{}: kernel and stride must be positive", i + 1)));
            }
        }
        self.spatial_sizes()?;
        for (name, w) in [
            ("fc1_2d", self.fc1_2d),
            ("fc1_3d", self.fc1_3d),
            ("fc_probs_2d", self.fc_probs_2d),
            ("fc2_3d", self.fc2_3d),
        ] {
            if w == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        self.grid()?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Starts from the `preset` key (or `default`) and applies overrides.
    pub fn from_kv(kv: &mut KeyValues, default: Preset) -> Result<Self> {
        let preset = kv.take::<Preset>("preset")?.unwrap_or(default);
        let mut c = Self::preset(preset);
        if let Some(v) = kv.take("input_size")? {
            c.input_size = v;
        }
        for i in 0..5 {
            let key = format!("conv{}", i + 1);
            if let Some(v) = kv.take_list::<usize>(&key)? {
                let [filters, kernel, stride, pad] = v[..] else {
                    return Err(kv.invalid(&key, "expected filters,kernel,stride,pad"));
                };
                c.convs[i] = conv(filters, kernel, stride, pad);
            }
        }
        for i in 0..3 {
            let key = format!("pool{}", i + 1);
            if let Some(v) = kv.take_list::<usize>(&key)? {
                let [kernel, stride] = v[..] else {
                    return Err(kv.invalid(&key, "expected kernel,stride"));
                };
                c.pools[i] = PoolSpec { kernel, stride };
            }
        }
        for (key, slot) in [
            ("fc1_2d", &mut c.fc1_2d),
            ("fc1_3d", &mut c.fc1_3d),
            ("fc_probs_2d", &mut c.fc_probs_2d),
            ("fc2_3d", &mut c.fc2_3d),
            ("grid", &mut c.grid_cells),
        ] {
            if let Some(v) = kv.take(key)? {
                *slot = v;
            }
        }
        if let Some(v) = kv.take("dropout")? {
            c.dropout = v;
        }
        if let Some(names) = kv.take_list::<String>("roots")? {
            let idx = names
                .iter()
                .map(|n| Joint::from_name(n).map(|j| j.index()))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| kv.invalid("roots", "unknown joint name"))?;
            c.roots = RootSet::new(idx).map_err(|e| kv.invalid("roots", e))?;
        }
        if let Some(w) = kv.take::<usize>("fc2_2d")? {
            if w != c.fc2_2d() {
                return Err(kv.invalid("fc2_2d", format!("must equal grid² · 17 = {}", c.fc2_2d())));
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Text that [`from_kv`](Self::from_kv) parses back to `self`.
    pub fn to_kv(&self) -> String {
        let mut s = format!("preset = {}\ninput_size = {}\n", self.preset, self.input_size);
        for (i, c) in self.convs.iter().enumerate() {
            s += &format!("conv{} = {},{},{},{}\n", i + 1, c.filters, c.kernel, c.stride, c.pad);
        }
        for (i, p) in self.pools.iter().enumerate() {
            s += &format!("pool{} = {},{}\n", i + 1, p.kernel, p.stride);
        }
        s += &format!(
            "fc1_2d = {}\nfc1_3d = {}\nfc_probs_2d = {}\nfc2_3d = {}\ngrid = {}\ndropout = {}\n",
            self.fc1_2d, self.fc1_3d, self.fc_probs_2d, self.fc2_3d, self.grid_cells, self.dropout
        );
        let names: Vec<&str> = self.roots.indices().iter().map(|&r| Joint::ALL[r].name()).collect();
        s += &format!("roots = {}\n", names.join(","));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_trunk_sizes() {
        let c = NetworkConfig::desk();
        assert_eq!(c.spatial_sizes().unwrap(), vec![29, 14, 14, 6, 6, 6, 6, 2]);
        assert_eq!(c.feature_dim().unwrap(), 256);
        assert_eq!(c.fc2_2d(), 64 * 17);
    }

    #[test]
    fn paper_grid_has_256_classes() {
        let c = NetworkConfig::paper();
        c.validate().unwrap();
        assert_eq!(c.grid_classes(), 256);
        assert_eq!(c.spatial_sizes().unwrap(), vec![110, 54, 27, 13, 13, 13, 13, 6]);
    }

    #[test]
    fn text_round_trip() {
        let mut c = NetworkConfig::desk();
        c.fc1_3d = 300;
        c.roots = RootSet::new(vec![0, 8]).unwrap();
        let mut kv = KeyValues::parse(&c.to_kv(), "x").unwrap();
        let back = NetworkConfig::from_kv(&mut kv, Preset::Paper).unwrap();
        kv.finish().unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn inconsistent_configs_are_rejected() {
        for text in ["conv1 = 8,70,2,0", "fc2_2d = 100", "grid = 0", "roots = pelvis,nose", "conv2 = 1,2", "dropout = 1"] {
            let mut kv = KeyValues::parse(text, "bad.cfg").unwrap();
            assert!(NetworkConfig::from_kv(&mut kv, Preset::Desk).is_err(), "{text}");
        }
    }

    #[test]
    fn variant_names() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
            assert_eq!(Variant::from_id(v.id()), Some(v));
        }
        assert_eq!(NetworkConfig::desk().roots_for(Variant::Baseline).len(), 1);
        assert_eq!(NetworkConfig::desk().roots_for(Variant::Full).len(), 6);
    }
}
