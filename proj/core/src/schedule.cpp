#include "mvar/schedule.hpp"

#include <algorithm>
#include <sstream>

namespace mvar {

void validate_schedule(const ScaleSchedule& s) {
  if (s.sides.empty()) throw std::invalid_argument("scale schedule is empty");
  if (s.sides.front() != 1)
    throw std::invalid_argument("scale schedule must start with side 1, got " +
                                std::to_string(s.sides.front()));
  for (size_t i = 1; i < s.sides.size(); ++i) {
    if (s.sides[i] <= s.sides[i - 1])
      throw std::invalid_argument("scale schedule sides must be strictly increasing (" +
                                  std::to_string(s.sides[i - 1]) + " then " +
                                  std::to_string(s.sides[i]) + ")");
  }
}

ScaleSchedule ScaleSchedule::from_sides(std::vector<int> sides) {
  ScaleSchedule s{std::move(sides)};
  validate_schedule(s);
  return s;
}

ScaleSchedule parse_scales(const std::string& text) {
  std::vector<int> sides;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    size_t pos = 0;
    int v = 0;
    try {
      v = std::stoi(tok, &pos);
    } catch (const std::exception&) {
      throw std::invalid_argument("bad scale list entry '" + tok + "'");
    }
    while (pos < tok.size() && std::isspace((unsigned char)tok[pos])) ++pos;
    if (pos != tok.size()) throw std::invalid_argument("bad scale list entry '" + tok + "'");
    sides.push_back(v);
  }
  return ScaleSchedule::from_sides(std::move(sides));
}

SequenceLayout build_layout(const ScaleSchedule& schedule) {
  validate_schedule(schedule);
  SequenceLayout lay;
  lay.block_lengths.reserve(schedule.sides.size());
  lay.block_offsets.reserve(schedule.sides.size());
  int off = 0;
  for (int s : schedule.sides) {
    lay.block_offsets.push_back(off);
    lay.block_lengths.push_back(s * s);
    off += s * s;
  }
  lay.total_len = off;
  return lay;
}

int block_of_position(const SequenceLayout& layout, int pos) {
  if (pos < 0 || pos >= layout.total_len)
    throw std::invalid_argument("position " + std::to_string(pos) + " outside sequence of length " +
                                std::to_string(layout.total_len));
  // first offset strictly greater than pos, then step back
  auto it = std::upper_bound(layout.block_offsets.begin(), layout.block_offsets.end(), pos);
  return (int)(it - layout.block_offsets.begin()) - 1;
}

std::vector<int> position_blocks(const SequenceLayout& layout) {
  std::vector<int> blocks((size_t)layout.total_len);
  for (int b = 0; b < layout.num_blocks(); ++b)
    for (int p = layout.block_offsets[b]; p < layout.block_end(b); ++p) blocks[(size_t)p] = b;
  return blocks;
}

}  // namespace mvar
