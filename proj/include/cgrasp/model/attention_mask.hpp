#pragma once

// Prefix-LM mask: point-cloud tokens attend to each other bidirectionally,
// every other query is causal and sees every point-cloud key once the
// point-cloud span has started.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "cgrasp/error.hpp"
#include "cgrasp/token_codec.hpp"

namespace cgrasp {

class AttentionMask {
 public:
  AttentionMask() = default;
  explicit AttentionMask(const SegmentLayout& layout) : layout_(layout), n_(layout.total()) {
    bits_.assign(n_ * n_, 0);
    for (std::size_t q = 0; q < n_; ++q)
      for (std::size_t k = 0; k < n_; ++k) bits_[q * n_ + k] = rule(layout_, q, k) ? 1 : 0;
  }

  /// Single-entry form of the mask rule.
  static bool rule(const SegmentLayout& layout, std::size_t q, std::size_t k) {
    const bool key_in_pc = k >= layout.pc_begin() && k < layout.pc_end();
    return k <= q || (key_in_pc && q >= layout.pc_begin());
  }

  std::size_t size() const { return n_; }
  const SegmentLayout& layout() const { return layout_; }
  bool operator()(std::size_t q, std::size_t k) const { return bits_[q * n_ + k] != 0; }

  /// Rows of '#' (can attend) and '.' (masked), one line per query.
  std::string render() const {
    std::string out;
    for (std::size_t q = 0; q < n_; ++q) {
      for (std::size_t k = 0; k < n_; ++k) out.push_back((*this)(q, k) ? '#' : '.');
      out.push_back('\n');
    }
    return out;
  }

 private:
  SegmentLayout layout_;
  std::size_t n_ = 0;
  std::vector<std::uint8_t> bits_;
};

/// Layout from span lengths in [text_pre, pc, text_post, contact, action] order.
inline SegmentLayout make_layout(const std::vector<long long>& spans) {
  if (spans.size() != 5) throw Error(ErrorKind::LayoutError, "layout needs exactly 5 span lengths");
  for (long long s : spans)
    if (s < 0) throw Error(ErrorKind::LayoutError, "span lengths must be non-negative");
  SegmentLayout l{static_cast<std::size_t>(spans[0]), static_cast<std::size_t>(spans[1]),
                  static_cast<std::size_t>(spans[2]), static_cast<std::size_t>(spans[3]),
                  static_cast<std::size_t>(spans[4])};
  if (l.total() == 0) throw Error(ErrorKind::LayoutError, "layout is empty");
  return l;
}

/// Builds the mask from explicit [begin, end) spans, which must be ordered,
/// contiguous, and non-overlapping.
inline AttentionMask build_attention_mask(const std::vector<std::pair<std::size_t, std::size_t>>& spans) {
  if (spans.size() != 5) throw Error(ErrorKind::LayoutError, "layout needs exactly 5 spans");
  std::size_t expect = 0;
  std::vector<long long> lengths;
  for (const auto& [b, e] : spans) {
    if (b != expect) throw Error(ErrorKind::LayoutError, b < expect ? "overlapping spans" : "gap between spans");
    if (e < b) throw Error(ErrorKind::LayoutError, "span ends before it begins");
    lengths.push_back(static_cast<long long>(e - b));
    expect = e;
  }
  return AttentionMask(make_layout(lengths));
}

inline AttentionMask build_attention_mask(const SegmentLayout& layout) { return AttentionMask(layout); }

}  // namespace cgrasp
