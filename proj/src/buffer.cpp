#include "crabs/buffer.hpp"

namespace crabs {

void ReplayBuffer::push(Transition t) {
  if (data.size() < capacity) {
    data.push_back(std::move(t));
  } else {
    data[write_pos] = std::move(t);
    write_pos = (write_pos + 1) % capacity;
  }
}

const Transition& ReplayBuffer::sample(Rng& rng) const {
  if (data.empty()) throw std::runtime_error("sampling from empty buffer");
  return data[std::size_t(rng.uniform_int(int(data.size())))];
}

void ReplayBuffer::sample_indices(Rng& rng, int n,
                                  std::vector<std::size_t>& out) const {
  if (data.empty()) throw std::runtime_error("sampling from empty buffer");
  out.resize(std::size_t(n));
  for (auto& idx : out) idx = std::size_t(rng.uniform_int(int(data.size())));
}

void buffer_to_writer(const ReplayBuffer& b, ByteWriter& w) {
  w.u64(b.capacity);
  w.u64(b.write_pos);
  w.u64(b.data.size());
  for (const auto& t : b.data) {
    w.vec(t.s);
    w.vec(t.a);
    w.vec(t.next);
    w.f64(t.r);
    w.u8(t.done ? 1 : 0);
    w.u8(t.safe ? 1 : 0);
  }
}

void buffer_from_reader(ReplayBuffer& b, ByteReader& r) {
  b.capacity = r.u64();
  b.write_pos = r.u64();
  std::uint64_t n = r.u64();
  b.data.clear();
  b.data.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    Transition t;
    t.s = r.vec();
    t.a = r.vec();
    t.next = r.vec();
    t.r = r.f64();
    t.done = r.u8() != 0;
    t.safe = r.u8() != 0;
    b.data.push_back(std::move(t));
  }
}

}  // namespace crabs
