#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "icllab/errors.hpp"
#include "icllab/interventions/effects.hpp"

namespace icl {

enum class Selection { top_p, non_fv_random, layer, explicit_set };
NLOHMANN_JSON_SERIALIZE_ENUM(Selection, {{Selection::top_p, "top-p"},
                                         {Selection::non_fv_random, "non-FV-random"},
                                         {Selection::layer, "layer"},
                                         {Selection::explicit_set, "explicit"}})

/// Ordered, duplicate-free heads with how they were chosen.
struct HeadSet {
  std::vector<HeadAddress> heads;
  Selection provenance = Selection::explicit_set;
  double p = 0;
  std::optional<Stream> stream_filter;

  HeadSet() = default;
  HeadSet(std::vector<HeadAddress> h, Selection how, double p_ = 0, std::optional<Stream> filter = std::nullopt)
      : heads(std::move(h)), provenance(how), p(p_), stream_filter(filter) {
    std::set<HeadAddress> seen;
    for (const auto& a : heads)
      if (!seen.insert(a).second) throw ContractError("head set repeats " + to_string(a));
  }

  std::size_t size() const { return heads.size(); }
  bool empty() const { return heads.empty(); }
  bool contains(const HeadAddress& h) const { return std::find(heads.begin(), heads.end(), h) != heads.end(); }
  bool operator==(const HeadSet&) const = default;
};

inline void to_json(nlohmann::json& j, const HeadSet& s) {
  j = {{"provenance", s.provenance}, {"p", s.p}, {"heads", s.heads}};
  j["stream_filter"] = s.stream_filter ? nlohmann::json(std::string(to_string(*s.stream_filter))) : nlohmann::json();
}

inline void from_json(const nlohmann::json& j, HeadSet& s) {
  std::optional<Stream> filter;
  if (!j.at("stream_filter").is_null()) filter = stream_from_string(j.at("stream_filter").get<std::string>());
  s = HeadSet(j.at("heads").get<std::vector<HeadAddress>>(), j.at("provenance").get<Selection>(),
              j.at("p").get<double>(), filter);
}

/// floor(p * n), robust to representation error in p * n.
inline std::size_t top_count(double p, std::size_t n) {
  if (!(p > 0 && p <= 1)) throw ContractError("p must lie in (0, 1]");
  return static_cast<std::size_t>(std::floor(p * static_cast<double>(n) + 1e-9));
}

namespace detail {

inline std::vector<HeadAddress> ranked_scope(const AIEMap& aie, std::optional<Stream> filter) {
  std::vector<HeadAddress> scope;
  for (const auto& [h, v] : aie.values)
    if (!filter || h.stream == *filter) scope.push_back(h);
  std::stable_sort(scope.begin(), scope.end(), [&](const HeadAddress& a, const HeadAddress& b) {
    const double va = aie.values.at(a), vb = aie.values.at(b);
    if (va != vb) return va > vb;
    return a < b;
  });
  return scope;
}

}  // namespace detail

/// The floor(p * |scope|) heads with the largest AIE; ties go to the
/// lexicographically smaller (layer, stream, head).
inline HeadSet top_p_heads(const AIEMap& aie, double p, std::optional<Stream> stream_filter = std::nullopt) {
  auto ranked = detail::ranked_scope(aie, stream_filter);
  ranked.resize(top_count(p, ranked.size()));
  return HeadSet(std::move(ranked), Selection::top_p, p, stream_filter);
}

inline constexpr double kFvHeadFraction = 0.20;

/// Uniform sample, the size of top_p_heads(aie, p), from heads outside the top 20%.
inline HeadSet sample_non_fv_heads(const AIEMap& aie, double p, std::mt19937_64& rng,
                                   std::optional<Stream> stream_filter = std::nullopt) {
  const auto n = top_p_heads(aie, p, stream_filter).size();
  const auto fv = top_p_heads(aie, kFvHeadFraction, stream_filter);
  std::vector<HeadAddress> pool;
  for (const auto& [h, v] : aie.values)
    if ((!stream_filter || h.stream == *stream_filter) && !fv.contains(h)) pool.push_back(h);
  if (pool.size() < n) {
    throw ContractError("only " + std::to_string(pool.size()) + " heads lie outside the top 20%; need " +
                        std::to_string(n));
  }
  for (std::size_t i = 0; i < n; ++i) {
    std::swap(pool[i], pool[std::uniform_int_distribution<std::size_t>(i, pool.size() - 1)(rng)]);
  }
  pool.resize(n);
  return HeadSet(std::move(pool), Selection::non_fv_random, p, stream_filter);
}

/// 100 * |A ∩ B| / |A| for equal-size sets; nullopt when both are empty.
inline std::optional<double> overlap(const HeadSet& a, const HeadSet& b) {
  if (a.size() != b.size()) {
    throw ContractError("overlap needs equal-size sets (" + std::to_string(a.size()) + " vs " +
                        std::to_string(b.size()) + ")");
  }
  if (a.empty()) return std::nullopt;
  std::size_t shared = 0;
  for (const auto& h : a.heads) shared += b.contains(h);
  return 100.0 * static_cast<double>(shared) / static_cast<double>(a.size());
}

}  // namespace icl
