#include "backdoorlab/features.hpp"

#include <cmath>
#include <stdexcept>

namespace backdoorlab {

BoundingBox AnchorGrid::anchor(int r, int c) const {
    const double cw = cell_width();
    const double ch = cell_height();
    return {c * cw, r * ch, (c + 1) * cw, (r + 1) * ch};
}

std::vector<BoundingBox> AnchorGrid::anchors() const {
    std::vector<BoundingBox> out;
    out.reserve(count());
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) out.push_back(anchor(r, c));
    return out;
}

void AnchorGrid::validate() const {
    if (rows <= 0 || cols <= 0 || image_width <= 0 || image_height <= 0)
        throw std::invalid_argument("AnchorGrid: dimensions must be positive");
    if (image_width % cols != 0 || image_height % rows != 0)
        throw std::invalid_argument("AnchorGrid: cells must tile the image exactly");
}

Eigen::VectorXd extract_features(const Image& img, const BoundingBox& anchor,
                                 const FeatureExtractorSpec& spec) {
    const int B = spec.bins;
    if (B < 1) throw std::invalid_argument("FeatureExtractorSpec: bins must be >= 1");
    const int x0 = static_cast<int>(anchor.x_min);
    const int y0 = static_cast<int>(anchor.y_min);
    const int x1 = static_cast<int>(anchor.x_max);
    const int y1 = static_cast<int>(anchor.y_max);
    if (x0 < 0 || y0 < 0 || x1 > img.width || y1 > img.height || x1 <= x0 || y1 <= y0)
        throw std::invalid_argument("extract_features: anchor outside image");

    Eigen::VectorXd f = Eigen::VectorXd::Zero(spec.dim());
    Eigen::VectorXd counts = Eigen::VectorXd::Zero(3 * B);
    double mean[3] = {0.0, 0.0, 0.0};
    const double n = static_cast<double>(x1 - x0) * (y1 - y0);

    for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) {
            const std::uint8_t* p = img.at(x, y);
            for (int ch = 0; ch < 3; ++ch) {
                mean[ch] += p[ch];
                counts[ch * B + (p[ch] * B) / 256] += 1.0;
            }
        }
    }
    for (int ch = 0; ch < 3; ++ch) f[ch] = mean[ch] / (255.0 * n);
    for (int k = 0; k < 3 * B; ++k) f[3 + k] = std::sqrt(counts[k] / n);
    f[spec.dim() - 1] = 1.0;  // constant bias feature, always last
    return f;
}

Eigen::MatrixXd extract_all_features(const Image& img, const AnchorGrid& grid,
                                     const FeatureExtractorSpec& spec) {
    grid.validate();
    if (img.width != grid.image_width || img.height != grid.image_height)
        throw std::invalid_argument("extract_all_features: image does not match grid");
    Eigen::MatrixXd F(grid.count(), spec.dim());
    int idx = 0;
    for (int r = 0; r < grid.rows; ++r)
        for (int c = 0; c < grid.cols; ++c) F.row(idx++) = extract_features(img, grid.anchor(r, c), spec);
    return F;
}

}  // namespace backdoorlab
