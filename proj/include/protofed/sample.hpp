#pragma once

#include <vector>

namespace protofed {

/// One labeled example: a dense feature vector and its class index.
struct Sample {
  std::vector<double> x;
  int label = 0;

  friend bool operator==(const Sample&, const Sample&) = default;
};

}  // namespace protofed
