#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "neuroalign/ops.hpp"

namespace neuroalign {

enum class MapMethod { kMdsInitTsne, kMds };

MapMethod parse_map_method(const std::string& s);
const char* to_string(MapMethod m);

struct MapOptions {
  MapMethod method = MapMethod::kMdsInitTsne;
  std::uint64_t seed = 0;
  double perplexity = 15.0;
  int iterations = 750;
  double learning_rate = 100.0;
  double early_exaggeration = 4.0;
  int exaggeration_iterations = 100;
};

// Classical MDS on Euclidean distances; columns are sign-normalized so the
// largest-magnitude entry of each axis is positive.
Mat classical_mds(const Mat& x, int dims = 2);

// N x 2 coordinates. Throws ConfigError below 10 objects and NumericError
// when every embedding is identical.
Mat embedding_map(const Mat& embeddings, const MapOptions& options = {});

// CSV with header object_id,concept,x,y.
void write_map_csv(const std::filesystem::path& path, const Mat& coords, const std::vector<std::string>& object_ids,
                   const std::vector<std::string>& concepts);

}  // namespace neuroalign
