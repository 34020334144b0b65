#pragma once

#include <string>
#include <utility>
#include <vector>

#include "lvrpo/tensor.hpp"

namespace lvrpo {

// Named parameter registry with a stable iteration order; the order defines
// the optimizer moment layout and the checkpoint tensor layout.
template <class S>
struct ParamStore {
  std::vector<std::pair<std::string, Tensor<S>>> items;

  Tensor<S>& add(const std::string& name, Tensor<S> t) {
    for (const auto& [n, _] : items) {
      if (n == name) fail("duplicate parameter name: " + name);
    }
    t.set_requires_grad();
    items.emplace_back(name, std::move(t));
    return items.back().second;
  }

  Tensor<S>& at(const std::string& name) {
    for (auto& [n, t] : items) {
      if (n == name) return t;
    }
    fail("unknown parameter: " + name);
  }

  const Tensor<S>& at(const std::string& name) const {
    for (const auto& [n, t] : items) {
      if (n == name) return t;
    }
    fail("unknown parameter: " + name);
  }

  std::vector<Tensor<S>*> all() {
    std::vector<Tensor<S>*> out;
    out.reserve(items.size());
    for (auto& [_, t] : items) out.push_back(&t);
    return out;
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& [_, t] : items) n += t.numel();
    return n;
  }

  void zero_grads() {
    for (auto& [_, t] : items) t.zero_grad();
  }

  ParamStore clone() const {
    ParamStore out;
    for (const auto& [n, t] : items) {
      Tensor<S> c = t.clone_detached();
      c.set_requires_grad();
      out.items.emplace_back(n, std::move(c));
    }
    return out;
  }

  template <class D>
  ParamStore<D> cast() const {
    ParamStore<D> out;
    for (const auto& [n, t] : items) {
      Tensor<D> c = cast_tensor<D>(t);
      c.set_requires_grad();
      out.items.emplace_back(n, std::move(c));
    }
    return out;
  }
};

// FNV-1a over the raw float payload, in registry order.
inline std::uint64_t params_checksum(const ParamStore<float>& p) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, t] : p.items) {
    for (const char ch : name) {
      h ^= static_cast<unsigned char>(ch);
      h *= 0x100000001b3ull;
    }
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.ptr());
    for (std::size_t i = 0; i < t.numel() * sizeof(float); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ull;
    }
  }
  return h;
}

}  // namespace lvrpo
