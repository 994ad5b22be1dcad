#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "tloc/error.hpp"
#include "tloc/tensor.hpp"

namespace tloc {

/// Per-frame feature vectors with timing metadata.
struct FeatureSequence {
  std::vector<double> timestamps;  ///< seconds, strictly increasing
  Tensor features;                 ///< [frames × d]
  double source_fps = 0.0;
  double duration_s = 0.0;

  [[nodiscard]] std::size_t frames() const noexcept { return timestamps.size(); }
  [[nodiscard]] std::size_t dim() const { return features.cols(); }

  void validate() const {
    if (timestamps.empty()) throw EmptySequenceError("feature sequence has no frames");
    if (features.rank() != 2 || features.rows() != timestamps.size()) {
      throw AlignmentError("feature rows (" + shape_str(features.shape()) + ") do not match " +
                           std::to_string(timestamps.size()) + " timestamps");
    }
    for (std::size_t i = 1; i < timestamps.size(); ++i) {
      if (!(timestamps[i] > timestamps[i - 1])) throw ContractError("timestamps must be strictly increasing");
    }
  }

  /// Sub-sequence made of the given frame indices (ascending).
  [[nodiscard]] FeatureSequence select(const std::vector<std::size_t>& idx) const {
    if (idx.empty()) throw EmptySequenceError("select: no frames");
    FeatureSequence out;
    out.source_fps = source_fps;
    out.duration_s = duration_s;
    out.features = Tensor({idx.size(), dim()});
    for (std::size_t i = 0; i < idx.size(); ++i) {
      out.timestamps.push_back(timestamps.at(idx[i]));
      auto src = features.row(idx[i]);
      std::copy(src.begin(), src.end(), out.features.row(i).begin());
    }
    return out;
  }

  /// Columns [c0, c1) as a new sequence.
  [[nodiscard]] FeatureSequence columns(std::size_t c0, std::size_t c1) const {
    if (c0 >= c1 || c1 > dim()) throw DimensionError("columns: bad range");
    FeatureSequence out = *this;
    out.features = Tensor({frames(), c1 - c0});
    for (std::size_t i = 0; i < frames(); ++i)
      for (std::size_t j = c0; j < c1; ++j) out.features(i, j - c0) = features(i, j);
    return out;
  }
};

/// Raw grayscale frames, intensities in [0, 1].
struct VideoFrames {
  Tensor pixels;  ///< [frames × height × width]
  double fps = 0.0;

  [[nodiscard]] std::size_t count() const { return pixels.empty() ? 0 : pixels.dim(0); }
  [[nodiscard]] std::size_t height() const { return pixels.dim(1); }
  [[nodiscard]] std::size_t width() const { return pixels.dim(2); }
  [[nodiscard]] std::size_t frame_size() const { return height() * width(); }
  [[nodiscard]] std::span<const double> frame(std::size_t i) const {
    return pixels.data().subspan(i * frame_size(), frame_size());
  }
  [[nodiscard]] double duration_s() const { return static_cast<double>(count()) / fps; }
};

}  // namespace tloc
