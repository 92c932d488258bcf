//
// Copyright 2026 The FedPrompt Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <vector>

#include "fedprompt/ccmp.hpp"
#include "fedprompt/data.hpp"
#include "gtest/gtest.h"

namespace fedprompt {
namespace {

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.train_per_class = 24;
  s.test_per_class = 12;
  return s;
}

std::size_t nonzero_bins(const std::vector<std::size_t>& h) {
  return static_cast<std::size_t>(std::count_if(h.begin(), h.end(), [](auto n) { return n > 0; }));
}

TEST(SyntheticTest, CountsAndLabels) {
  const auto spec = small_spec();
  const Dataset ds = generate_synthetic(spec, 1);
  EXPECT_EQ(ds.num_classes, 8u);
  ASSERT_EQ(ds.train.size(), 8u * 24);
  ASSERT_EQ(ds.test.size(), 8u * 12);
  std::vector<std::size_t> per_class(8, 0);
  for (const auto& s : ds.train) {
    ASSERT_LT(s.label, 8u);
    ++per_class[s.label];
    EXPECT_EQ(s.image.rows(), 16u);
  }
  for (auto n : per_class) EXPECT_EQ(n, 24u);
}

TEST(SyntheticTest, SameSeedSameBytes) {
  const auto a = generate_synthetic(small_spec(), 5);
  const auto b = generate_synthetic(small_spec(), 5);
  const auto c = generate_synthetic(small_spec(), 6);
  for (std::size_t i = 0; i < a.train.size(); ++i) EXPECT_EQ(a.train[i].image, b.train[i].image);
  EXPECT_FALSE(a.train[0].image == c.train[0].image);
}

TEST(SyntheticTest, DegenerateSpecIsConfigError) {
  auto s = small_spec();
  s.num_classes = 0;
  EXPECT_THROW(generate_synthetic(s, 1), ConfigError);
  s = small_spec();
  s.noise = -1.0;
  EXPECT_THROW(generate_synthetic(s, 1), ConfigError);
}

TEST(SyntheticTest, WellSeparatedIsCentroidSeparable) {
  auto spec = small_spec();
  spec.separation = 3.0;
  spec.noise = 0.3;
  const Dataset ds = generate_synthetic(spec, 2);
  const std::size_t px = 16 * 16;
  std::vector<std::vector<double>> centroid(8, std::vector<double>(px, 0.0));
  for (const auto& s : ds.train) {
    for (std::size_t p = 0; p < px; ++p) centroid[s.label][p] += s.image[p] / 24.0;
  }
  std::size_t correct = 0;
  for (const auto& s : ds.test) {
    std::size_t best = 0;
    double best_d = INFINITY;
    for (std::size_t c = 0; c < 8; ++c) {
      double d = 0.0;
      for (std::size_t p = 0; p < px; ++p) d += std::pow(s.image[p] - centroid[c][p], 2);
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    correct += best == s.label;
  }
  EXPECT_GT(static_cast<double>(correct) / static_cast<double>(ds.test.size()), 0.99);
}

TEST(SyntheticTest, DomainsChangePixelsNotLabelsOrShards) {
  auto plain = small_spec();
  auto shifted = small_spec();
  shifted.domains = {{0.0, 0.0}, {0.7, 0.5}, {-1.2, -0.3}};
  const Dataset a = generate_synthetic(plain, 4);
  const Dataset b = generate_synthetic(shifted, 4);
  ASSERT_EQ(a.train.size(), b.train.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(a.train[i].label, b.train[i].label);
    EXPECT_EQ(b.train[i].domain, (i % 24) % 3);
    any_diff = any_diff || !(a.train[i].image == b.train[i].image);
  }
  EXPECT_TRUE(any_diff);
  const Partition pa = partition_pathological(a, 12, 2, 4);
  const Partition pb = partition_pathological(b, 12, 2, 4);
  EXPECT_EQ(pa.train, pb.train);
  EXPECT_EQ(pa.test, pb.test);
}

TEST(PathologicalTest, OneClassPerClient) {
  const Dataset ds = generate_synthetic(small_spec(), 1);
  const Partition p = partition_pathological(ds, 8, 1, 1);
  const auto h = label_histograms(ds.train, p.train, 8);
  std::vector<int> owner_count(8, 0);
  for (const auto& row : h) {
    EXPECT_EQ(nonzero_bins(row), 1u);
    for (std::size_t c = 0; c < 8; ++c) owner_count[c] += row[c] > 0;
  }
  for (int n : owner_count) EXPECT_EQ(n, 1);
}

TEST(PathologicalTest, TwelveClientsTwoClassesEach) {
  const Dataset ds = generate_synthetic(small_spec(), 3);
  const Partition p = partition_pathological(ds, 12, 2, 3);
  EXPECT_EQ(p.num_clients(), 12u);
  for (const auto& row : label_histograms(ds.train, p.train, 8)) EXPECT_EQ(nonzero_bins(row), 2u);
  for (const auto& row : label_histograms(ds.test, p.test, 8)) EXPECT_EQ(nonzero_bins(row), 2u);
  EXPECT_TRUE(is_disjoint_cover(p.train, ds.train.size()));
  EXPECT_TRUE(is_disjoint_cover(p.test, ds.test.size()));
}

TEST(PathologicalTest, InfeasibleIsConfigError) {
  const Dataset ds = generate_synthetic(small_spec(), 1);
  EXPECT_THROW(partition_pathological(ds, 4, 9, 1), ConfigError);
  EXPECT_THROW(partition_pathological(ds, 3, 2, 1), ConfigError);
  EXPECT_THROW(partition_pathological(ds, 0, 2, 1), ConfigError);
}

TEST(DirichletTest, HugeBetaIsNearUniform) {
  auto spec = small_spec();
  spec.train_per_class = 1200;
  spec.test_per_class = 12;
  const Dataset ds = generate_synthetic(spec, 1);
  const Partition p = partition_dirichlet(ds, 10, 1e6, 1);
  for (const auto& row : label_histograms(ds.train, p.train, 8)) {
    for (std::size_t n : row) EXPECT_LT(std::abs(static_cast<double>(n) - 120.0) / 120.0, 0.05);
  }
}

TEST(DirichletTest, SmallBetaLowersLabelEntropy) {
  const Dataset ds = generate_synthetic(small_spec(), 2);
  auto mean_entropy = [&](double beta) {
    double total = 0.0;
    int n = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const Partition p = partition_dirichlet(ds, 12, beta, seed);
      for (const auto& row : label_histograms(ds.train, p.train, 8)) {
        total += label_entropy(row);
        ++n;
      }
    }
    return total / n;
  };
  const double uniform = std::log(8.0);
  const double skewed = mean_entropy(0.3);
  EXPECT_LT(skewed, 0.6 * uniform);
  EXPECT_LT(skewed, mean_entropy(100.0));
}

TEST(DirichletTest, BadBetaIsConfigError) {
  const Dataset ds = generate_synthetic(small_spec(), 1);
  EXPECT_THROW(partition_dirichlet(ds, 4, 0.0, 1), ConfigError);
  EXPECT_THROW(partition_dirichlet(ds, 4, -1.0, 1), ConfigError);
}

TEST(PartitionProperty, DisjointCoverOver100Seeds) {
  const Dataset ds = generate_synthetic(small_spec(), 9);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Partition p = partition_pathological(ds, 12, 2, seed);
    const Partition q = partition_dirichlet(ds, 12, 0.3, seed);
    ASSERT_TRUE(is_disjoint_cover(p.train, ds.train.size())) << seed;
    ASSERT_TRUE(is_disjoint_cover(p.test, ds.test.size())) << seed;
    ASSERT_TRUE(is_disjoint_cover(q.train, ds.train.size())) << seed;
    ASSERT_TRUE(is_disjoint_cover(q.test, ds.test.size())) << seed;
    for (const auto& s : q.train) ASSERT_FALSE(s.empty());
  }
}

TEST(PartitionProperty, PriorsReproduceHistograms) {
  const Dataset ds = generate_synthetic(small_spec(), 10);
  const Partition q = partition_dirichlet(ds, 12, 0.3, 10);
  const auto hist = label_histograms(ds.train, q.train, 8);
  for (std::size_t k = 0; k < 12; ++k) {
    const auto labels = labels_of(ds.train, q.train[k]);
    const auto prior = ccmp::compute_class_priors(labels, 8);
    for (std::size_t c = 0; c < 8; ++c) {
      EXPECT_EQ(prior[c], static_cast<double>(hist[k][c]) / static_cast<double>(labels.size()));
    }
  }
}

TEST(PartitionProperty, SameSeedSameSplit) {
  const Dataset ds = generate_synthetic(small_spec(), 1);
  EXPECT_EQ(partition_dirichlet(ds, 6, 0.3, 4).train, partition_dirichlet(ds, 6, 0.3, 4).train);
  EXPECT_EQ(partition_pathological(ds, 6, 3, 4).train, partition_pathological(ds, 6, 3, 4).train);
}

TEST(DisjointCoverTest, DetectsOverlapAndGaps) {
  EXPECT_TRUE(is_disjoint_cover({{0, 2}, {1}}, 3));
  EXPECT_FALSE(is_disjoint_cover({{0, 1}, {1, 2}}, 3));
  EXPECT_FALSE(is_disjoint_cover({{0}, {2}}, 3));
  EXPECT_FALSE(is_disjoint_cover({{0, 3}}, 3));
}

TEST(PartitionCsvTest, Format) {
  auto spec = small_spec();
  spec.num_classes = 2;
  spec.train_per_class = 2;
  const Dataset ds = generate_synthetic(spec, 1);
  const Partition p = partition_pathological(ds, 2, 1, 1);
  std::ostringstream part, hist;
  write_partition_csv(part, ds, p);
  write_histogram_csv(hist, ds, p);
  const std::string ps = part.str(), hs = hist.str();
  EXPECT_EQ(ps.substr(0, ps.find('\n')), "client,sample_index,label");
  EXPECT_EQ(std::count(ps.begin(), ps.end(), '\n'), 5);
  EXPECT_EQ(hs.substr(0, hs.find('\n')), "client,class,count");
  EXPECT_EQ(std::count(hs.begin(), hs.end(), '\n'), 5);
}

TEST(EntropyTest, Values) {
  EXPECT_EQ(label_entropy({0, 0}), 0.0);
  EXPECT_EQ(label_entropy({5, 0}), 0.0);
  EXPECT_NEAR(label_entropy({3, 3, 3, 3}), std::log(4.0), 1e-15);
}

}  // namespace
}  // namespace fedprompt
