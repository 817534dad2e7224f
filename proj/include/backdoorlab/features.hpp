#pragma once

#include <Eigen/Dense>
#include <vector>

#include "backdoorlab/geometry.hpp"
#include "backdoorlab/image.hpp"

namespace backdoorlab {

/// Fixed non-overlapping grid of candidate boxes, one per cell, tiling the
/// image exactly. Image dimensions must be divisible by the grid shape.
struct AnchorGrid {
    int rows = 4;
    int cols = 4;
    int image_width = 256;
    int image_height = 256;

    int cell_width() const { return image_width / cols; }
    int cell_height() const { return image_height / rows; }
    int count() const { return rows * cols; }

    BoundingBox anchor(int r, int c) const;
    std::vector<BoundingBox> anchors() const;  // row-major order

    void validate() const;  // throws std::invalid_argument on a non-tiling grid
};

/// Hand-crafted per-anchor pooled color statistics: mean RGB (3), a B-bin
/// per-channel color histogram (3B), and a constant bias feature (1).
/// Histogram entries are sqrt(pixel fraction) per bin — Hellinger scaling —
/// so a patch covering 1% of a cell still moves its bin by ~0.1 rather
/// than 0.01, which keeps small triggers linearly separable.
/// Deterministic and translation-equivariant: a pattern shifted by a whole
/// number of cells produces identical features in the shifted cell.
struct FeatureExtractorSpec {
    int bins = 4;

    int dim() const { return 3 + 3 * bins + 1; }
};

/// Features for one anchor box (integer pixel rectangle).
Eigen::VectorXd extract_features(const Image& img, const BoundingBox& anchor,
                                 const FeatureExtractorSpec& spec);

/// Features for every anchor of the grid, one row per anchor.
Eigen::MatrixXd extract_all_features(const Image& img, const AnchorGrid& grid,
                                     const FeatureExtractorSpec& spec);

}  // namespace backdoorlab
