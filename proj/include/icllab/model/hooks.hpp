#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <utility>
#include <vector>

#include "icllab/model/config.hpp"
#include "icllab/numerics/tensor.hpp"

namespace icl {

/// A head output to record: head `head` at token `position`.
struct CaptureRequest {
  HeadAddress head;
  std::size_t position = 0;
  auto operator<=>(const CaptureRequest&) const = default;
};

using CaptureSet = std::set<CaptureRequest>;

enum class InterventionMode { replace, add, zero };

template <typename T>
struct Intervention {
  HeadAddress head;
  std::size_t position = 0;
  InterventionMode mode = InterventionMode::replace;
  std::vector<T> vector;  // unused for zero mode
};

/// Edits applied to head outputs at the hook point: after the head's own
/// computation, before the layer's output projection.
template <typename T>
struct InterventionPlan {
  std::vector<Intervention<T>> directives;

  bool empty() const { return directives.empty(); }
  InterventionPlan& replace(HeadAddress h, std::size_t pos, std::vector<T> v) {
    directives.push_back({h, pos, InterventionMode::replace, std::move(v)});
    return *this;
  }
  InterventionPlan& add(HeadAddress h, std::size_t pos, std::vector<T> v) {
    directives.push_back({h, pos, InterventionMode::add, std::move(v)});
    return *this;
  }
  InterventionPlan& zero(HeadAddress h, std::size_t pos) {
    directives.push_back({h, pos, InterventionMode::zero, {}});
    return *this;
  }
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;  // [rows x vocab]; rows = sequence length, or 1 when only the last row was requested
  std::map<CaptureRequest, std::vector<T>> captured;
  // Filled when stream capture is requested: pre-projection stream matrices
  // per (layer, stream) and the projection input per layer.
  std::map<std::pair<std::size_t, Stream>, Tensor<T>> streams;
  std::map<std::size_t, Tensor<T>> projection_inputs;

  const std::vector<T>& head_output(const HeadAddress& h, std::size_t pos) const {
    return captured.at(CaptureRequest{h, pos});
  }
};

template <typename T>
struct ForwardOptions {
  CaptureSet capture;
  InterventionPlan<T> plan;
  bool capture_streams = false;
  bool last_logits_only = false;
};

}  // namespace icl
