#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "neuroalign/datamodel.hpp"
#include "neuroalign/errors.hpp"
#include "test_support.hpp"

namespace neuroalign {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("neuroalign_dm_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

json read(const fs::path& p) { return json::parse(std::ifstream(p)); }
void write(const fs::path& p, const json& j) { std::ofstream(p) << j.dump(); }

TEST(ModalityKind, ShapesAndValidation) {
  const auto eeg = ModalityKind::time_resolved("eeg", 17, 32);
  EXPECT_EQ(eeg.signal_rows(), 17);
  EXPECT_EQ(eeg.signal_cols(), 32);
  const auto fmri = ModalityKind::static_features("fmri", 64);
  EXPECT_TRUE(fmri.is_static());
  EXPECT_EQ(fmri.signal_cols(), 1);
  EXPECT_THROW(ModalityKind::time_resolved("x", 0, 4), ValidationError);
  EXPECT_THROW(ModalityKind::time_resolved("x", 3, 1), ValidationError);
  EXPECT_THROW(ModalityKind::time_resolved("", 3, 4), ValidationError);
}

TEST(Synthetic, CountsIdsAndNormalization) {
  const auto spec = testing::small_spec(1, 10);
  const PairedDataset ds = generate_synthetic(spec);
  EXPECT_EQ(ds.embeddings.size(), 20u);
  EXPECT_EQ(ds.samples.size(), 20u * 3 * 2);
  EXPECT_EQ(ds.concepts().size(), 10u);
  EXPECT_EQ(ds.subjects("eeg").size(), 2u);
  EXPECT_TRUE(ds.embeddings.count("c0003_i01"));
  EXPECT_EQ(ds.concept_of("c0003_i01"), "c0003");
  for (const auto& [id, e] : ds.embeddings) {
    EXPECT_NEAR(e.vector.norm(), 1.0, 1e-6) << id;
    EXPECT_EQ(e.vector.size(), spec.embedding_dim);
  }
  for (const auto& s : ds.samples) {
    for (Eigen::Index i = 0; i < s.signal.size(); ++i) {
      const double v = s.signal.data()[i];
      EXPECT_EQ(v, static_cast<double>(static_cast<float>(v)));
    }
  }
  EXPECT_NO_THROW(ds.validate());
}

TEST(Synthetic, DeterministicUnderSeed) {
  const auto spec = testing::small_spec(7, 6);
  EXPECT_EQ(generate_synthetic(spec), generate_synthetic(spec));
  auto other = spec;
  other.seed = 8;
  EXPECT_FALSE(generate_synthetic(spec) == generate_synthetic(other));
}

TEST(Synthetic, NoiselessSubjectsDifferOnlyByGain) {
  auto spec = testing::small_spec(3, 4);
  spec.noise_sigma = 0.0;
  const PairedDataset ds = generate_synthetic(spec);
  std::map<std::string, std::vector<const NeuralSample*>> by_stim;
  for (const auto& s : ds.samples) {
    if (s.modality == "meg") by_stim[s.stimulus_id].push_back(&s);
  }
  for (const auto& [stim, v] : by_stim) {
    ASSERT_EQ(v.size(), 2u);
    const Mat& a = v[0]->signal;
    const Mat& b = v[1]->signal;
    const double ratio = b.squaredNorm() > 0 ? a.cwiseProduct(b).sum() / b.squaredNorm() : 0.0;
    EXPECT_LT((a - ratio * b).norm(), 1e-5 * a.norm()) << stim;
  }
}

TEST(Synthetic, InvalidSpecsRejected) {
  auto spec = testing::small_spec();
  spec.n_concepts = 0;
  EXPECT_THROW(generate_synthetic(spec), ValidationError);
  spec = testing::small_spec();
  spec.modalities.clear();
  EXPECT_THROW(generate_synthetic(spec), ValidationError);
  spec = testing::small_spec();
  spec.noise_sigma = -1;
  EXPECT_THROW(generate_synthetic(spec), ValidationError);
  EXPECT_THROW(synthetic_spec_from_json(json{{"n_concepts", 3}, {"bogus", 1}}), ValidationError);
  EXPECT_THROW(synthetic_spec_from_json(json{{"n_concepts", "many"}}), ValidationError);
}

TEST(Synthetic, SpecJsonRoundTrip) {
  const auto spec = testing::small_spec(5);
  const SyntheticSpec back = synthetic_spec_from_json(to_json(spec));
  EXPECT_EQ(generate_synthetic(spec), generate_synthetic(back));
}

TEST(Split, ZeroShotKeepsConceptsDisjoint) {
  const PairedDataset ds = split_zero_shot(generate_synthetic(testing::small_spec(0, 20)), 0.2, 11);
  const auto train = ds.concepts(Split::kTrain);
  const auto test = ds.concepts(Split::kTest);
  EXPECT_EQ(test.size(), 4u);
  EXPECT_EQ(train.size(), 16u);
  for (const auto& c : test) EXPECT_EQ(std::count(train.begin(), train.end(), c), 0);
  for (const auto& s : ds.stimuli(Split::kTest)) {
    EXPECT_TRUE(std::count(test.begin(), test.end(), ds.concept_of(s)));
  }
  EXPECT_EQ(ds.sample_indices("eeg", Split::kTest).size(), 4u * 2 * 2);
}

TEST(Split, DeterministicAndSeedSensitive) {
  const PairedDataset base = generate_synthetic(testing::small_spec(0, 30));
  EXPECT_EQ(split_zero_shot(base, 0.3, 1).concepts(Split::kTest), split_zero_shot(base, 0.3, 1).concepts(Split::kTest));
  EXPECT_NE(split_zero_shot(base, 0.3, 1).concepts(Split::kTest), split_zero_shot(base, 0.3, 2).concepts(Split::kTest));
}

TEST(Split, RejectsDegenerateFractions) {
  const PairedDataset base = generate_synthetic(testing::small_spec(0, 5));
  EXPECT_THROW(split_zero_shot(base, 0.0, 0), ValidationError);
  EXPECT_THROW(split_zero_shot(base, 1.0, 0), ValidationError);
  EXPECT_THROW(split_zero_shot(base, 0.01, 0), ValidationError);
}

TEST(DatasetIo, RoundTripIsExact) {
  const PairedDataset ds = split_zero_shot(generate_synthetic(testing::small_spec(2, 8)), 0.25, 3);
  const fs::path dir = temp_dir("roundtrip");
  save_dataset(ds, dir);
  EXPECT_EQ(load_dataset(dir / "manifest.json"), ds);
}

class DatasetTamper : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = temp_dir(::testing::UnitTest::GetInstance()->current_test_info()->name());
    save_dataset(split_zero_shot(generate_synthetic(testing::small_spec(2, 8)), 0.25, 3), dir);
    manifest = read(dir / "manifest.json");
  }
  fs::path dir;
  json manifest;
};

TEST_F(DatasetTamper, MissingEmbeddingIsIntegrityError) {
  manifest["embeddings"].erase(0);
  write(dir / "manifest.json", manifest);
  EXPECT_THROW(load_dataset(dir / "manifest.json"), IntegrityError);
}

TEST_F(DatasetTamper, ShapeMismatchIsFormatError) {
  manifest["modalities"][0]["channels"] = manifest["modalities"][0]["channels"].get<int>() + 1;
  write(dir / "manifest.json", manifest);
  EXPECT_THROW(load_dataset(dir / "manifest.json"), FormatError);
}

TEST_F(DatasetTamper, ConflictingSplitIsIntegrityError) {
  auto& s = manifest["samples"][0];
  s["split"] = s["split"] == "train" ? "test" : "train";
  write(dir / "manifest.json", manifest);
  EXPECT_THROW(load_dataset(dir / "manifest.json"), IntegrityError);
}

TEST_F(DatasetTamper, MalformedJsonIsFormatError) {
  std::ofstream(dir / "manifest.json") << "{ not json";
  EXPECT_THROW(load_dataset(dir / "manifest.json"), FormatError);
}

TEST(Dataset, EmbeddingMatrixFollowsRequestedOrder) {
  const PairedDataset ds = generate_synthetic(testing::small_spec(0, 3));
  const Mat m = ds.embedding_matrix({"c0002_i01", "c0000_i00"});
  EXPECT_EQ(Vec(m.row(0).transpose()), ds.embeddings.at("c0002_i01").vector);
  EXPECT_EQ(Vec(m.row(1).transpose()), ds.embeddings.at("c0000_i00").vector);
  EXPECT_THROW(ds.embedding_matrix({"missing"}), IntegrityError);
}

}  // namespace
}  // namespace neuroalign
