#pragma once

#include <filesystem>

#include "bifseg/grid.hpp"

namespace bifseg {

enum class BitDepth { k8 = 8, k16 = 16 };

/// Reads a single-channel PNG or binary PGM (P5), 8 or 16 bit, scaled to [0, 1].
Grid2D load_image(const std::filesystem::path& path);

/// Raw integer samples, for instance-label rasters.
Grid<int> load_label_image(const std::filesystem::path& path);

/// Writes the first channel, clamped to [0, 1] and quantized. The format follows
/// the extension: `.png` or `.pgm`.
void save_image(const std::filesystem::path& path, const Grid2D& image,
                BitDepth depth = BitDepth::k8);

/// Writes integer samples verbatim (8 bit if all fit, else 16 bit).
void save_label_image(const std::filesystem::path& path, const Grid<int>& labels);

/// Binary mask as 0/255.
void save_mask(const std::filesystem::path& path, const LabelMap& mask);
LabelMap load_mask(const std::filesystem::path& path);

// Float feature-map cache: "BIFG", u32 width, height, channels (little endian),
// then float32 samples in planar order.
void save_raw(const std::filesystem::path& path, const Grid2D& grid);
Grid2D load_raw(const std::filesystem::path& path);

}  // namespace bifseg
