#pragma once

#include <cstdint>
#include <vector>

#include "crabs/common.hpp"
#include "crabs/rng.hpp"
#include "crabs/serialize.hpp"

namespace crabs {

struct Transition {
  Vec s, a, next;
  double r = 0.0;
  bool done = false;  // episode ended here (violation or horizon)
  bool safe = true;   // next state satisfied the constraint
};

struct ReplayBuffer {
  std::vector<Transition> data;
  std::size_t capacity = 1u << 20;
  std::size_t write_pos = 0;  // ring position once full

  std::size_t size() const { return data.size(); }
  void push(Transition t);
  const Transition& sample(Rng& rng) const;
  void sample_indices(Rng& rng, int n, std::vector<std::size_t>& out) const;
};

void buffer_to_writer(const ReplayBuffer& b, ByteWriter& w);
void buffer_from_reader(ReplayBuffer& b, ByteReader& r);

}  // namespace crabs
