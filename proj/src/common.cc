#include "tmal/common.h"

namespace tmal {

std::string_view modality_name(Modality m) {
  switch (m) {
    case Modality::kImage:
      return "image";
    case Modality::kDna:
      return "dna";
    case Modality::kText:
      return "text";
  }
  return "unknown";
}

Modality parse_modality(std::string_view name) {
  if (name == "image") return Modality::kImage;
  if (name == "dna") return Modality::kDna;
  if (name == "text") return Modality::kText;
  throw UsageError("unknown modality '" + std::string(name) + "'");
}

// splitmix64
std::uint64_t Rng::next_u64() {
  std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw UsageError("Rng::below requires n > 0");
  // Lemire-style rejection to avoid modulo bias.
  const std::uint64_t limit = -n % n;
  for (;;) {
    std::uint64_t x = next_u64();
    if (x >= limit) return x % n;
  }
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
  // FNV-1a over the tag, folded into the base seed.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : tag) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  Rng mix(base ^ h);
  return mix.next_u64();
}

}  // namespace tmal
