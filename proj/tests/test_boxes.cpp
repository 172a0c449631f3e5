// Copyright (c) 2026 The pets-lab Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "pets/boxes.hpp"
#include "pets/oracles.hpp"

using namespace pets;

namespace {

BoxRect random_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double w = 0.05 + 0.4 * unit(rng);
  const double h = 0.05 + 0.4 * unit(rng);
  const double x1 = (1.0 - w) * unit(rng);
  const double y1 = (1.0 - h) * unit(rng);
  return BoxRect(x1, y1, x1 + w, y1 + h);
}

std::vector<Detection> random_cluster(std::mt19937_64& rng, int n, int cls) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Detection> dets;
  for (int i = 0; i < n; ++i)
    dets.emplace_back(random_box(rng), cls, 0.05 + 0.95 * unit(rng));
  return dets;
}

}  // namespace

TEST_CASE("BoxRect rejects degenerate and out-of-range boxes", "[boxes]") {
  CHECK_THROWS_AS(BoxRect(0.5, 0.1, 0.5, 0.2), std::invalid_argument);
  CHECK_THROWS_AS(BoxRect(0.3, 0.1, 0.2, 0.4), std::invalid_argument);
  CHECK_THROWS_AS(BoxRect(-0.1, 0.1, 0.2, 0.4), std::invalid_argument);
  CHECK_THROWS_AS(BoxRect(0.1, 0.1, 1.2, 0.4), std::invalid_argument);
  CHECK_NOTHROW(BoxRect(0.0, 0.0, 1.0, 1.0));
}

TEST_CASE("iou hand cases", "[boxes]") {
  const BoxRect b(0.1, 0.1, 0.4, 0.5);
  CHECK(iou(b, b) == 1.0);
  CHECK(iou(BoxRect(0, 0, 0.3, 0.3), BoxRect(0.5, 0.5, 0.9, 0.9)) == 0.0);
  CHECK_THAT(iou(BoxRect(0, 0, 1, 1), BoxRect(0, 0, 0.5, 1)),
             Catch::Matchers::WithinAbs(0.5, 1e-12));
}

TEST_CASE("iou is symmetric and bounded", "[boxes]") {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 200; ++i) {
    const BoxRect a = random_box(rng);
    const BoxRect b = random_box(rng);
    const double v = iou(a, b);
    CHECK(v == iou(b, a));
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("confidence_filter keeps detections at or above delta", "[boxes]") {
  std::vector<Detection> dets;
  dets.emplace_back(BoxRect(0.1, 0.1, 0.2, 0.2), 0, 0.4);
  dets.emplace_back(BoxRect(0.3, 0.3, 0.4, 0.4), 1, 0.5);
  dets.emplace_back(BoxRect(0.5, 0.5, 0.6, 0.6), 2, 0.9);

  SECTION("delta zero is the identity") {
    const auto out = confidence_filter(dets, 0.0);
    REQUIRE(out.size() == 3);
    CHECK(out[0].confidence == 0.4);
  }
  SECTION("all below delta gives an empty list") {
    CHECK(confidence_filter(dets, 0.95).empty());
  }
  SECTION("threshold is inclusive and order is preserved") {
    const auto out = confidence_filter(dets, 0.5);
    REQUIRE(out.size() == 2);
    CHECK(out[0].confidence == 0.5);
    CHECK(out[1].confidence == 0.9);
  }
}

TEST_CASE("nms hand cases", "[boxes]") {
  const BoxRect b(0.2, 0.2, 0.5, 0.5);

  SECTION("single detection is unchanged") {
    const std::vector<Detection> one = {Detection(b, 0, 0.7)};
    CHECK(nms(one, 0.5).size() == 1);
  }
  SECTION("identical boxes of one class collapse to the strongest") {
    const std::vector<Detection> two = {Detection(b, 0, 0.8), Detection(b, 0, 0.9)};
    const auto out = nms(two, 0.5);
    REQUIRE(out.size() == 1);
    CHECK(out[0].confidence == 0.9);
  }
  SECTION("identical boxes of different classes both survive") {
    const std::vector<Detection> two = {Detection(b, 0, 0.9), Detection(b, 1, 0.8)};
    CHECK(nms(two, 0.5).size() == 2);
  }
  SECTION("suppression is inclusive at the threshold") {
    // IoU of these two boxes is exactly 1/3
    const std::vector<Detection> two = {Detection(BoxRect(0.0, 0.0, 0.2, 0.2), 0, 0.9),
                                        Detection(BoxRect(0.0, 0.1, 0.2, 0.3), 0, 0.8)};
    CHECK(nms(two, 1.0 / 3.0).size() == 1);
    CHECK(nms(two, 0.34).size() == 2);
  }
}

TEST_CASE("nms result does not depend on input order", "[boxes]") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Detection> dets;
    for (int i = 0; i < 12; ++i)
      dets.emplace_back(random_box(rng), i % 2, 0.05 + 0.95 * unit(rng));
    auto shuffled = dets;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto a = nms(dets, 0.4);
    const auto b = nms(shuffled, 0.4);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].box == b[i].box);
      CHECK(a[i].confidence == b[i].confidence);
    }
  }
}

TEST_CASE("match_pairs hand cases", "[boxes]") {
  const BoxRect a(0.2, 0.2, 0.5, 0.5);
  const BoxRect near_a(0.22, 0.2, 0.52, 0.5);

  SECTION("either side empty yields no pairs") {
    CHECK(match_pairs({}, {Detection(a, 0, 0.9)}, 0.5).empty());
    CHECK(match_pairs({Detection(a, 0, 0.9)}, {}, 0.5).empty());
  }
  SECTION("one overlapping same-class pair is matched") {
    const auto pairs = match_pairs({Detection(a, 0, 0.9)}, {Detection(near_a, 0, 0.8)}, 0.5);
    REQUIRE(pairs.size() == 1);
    CHECK(pairs[0].first.confidence == 0.9);
    CHECK(pairs[0].second.confidence == 0.8);
  }
  SECTION("class mismatch blocks the pair") {
    CHECK(match_pairs({Detection(a, 0, 0.9)}, {Detection(a, 1, 0.8)}, 0.5).empty());
  }
}

TEST_CASE("match_pairs is one-to-one and meets the criterion", "[boxes]") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const auto st = random_cluster(rng, 6, trial % 2);
    const auto dt = random_cluster(rng, 6, trial % 2);
    const auto pairs = match_pairs(st, dt, 0.3);
    CHECK(pairs.size() <= 6);
    for (const auto& [s, d] : pairs) {
      CHECK(s.class_id == d.class_id);
      CHECK(iou(s.box, d.box) >= 0.3);
    }
  }
}

TEST_CASE("wbf_fuse hand cases", "[boxes]") {
  SECTION("identical inputs are a fixed point") {
    const BoxRect b(0.2, 0.3, 0.6, 0.7);
    const PseudoLabel out = wbf_fuse({Detection(b, 1, 0.6)}, {Detection(b, 1, 0.6)}, 0.5);
    CHECK_THAT(out.box.x1, Catch::Matchers::WithinAbs(b.x1, 1e-15));
    CHECK_THAT(out.box.y2, Catch::Matchers::WithinAbs(b.y2, 1e-15));
    CHECK_THAT(out.fused_confidence, Catch::Matchers::WithinAbs(0.6, 1e-15));
    CHECK(out.class_id == 1);
  }
  SECTION("confidence-weighted mean of two boxes") {
    const Detection st(BoxRect(0.2, 0.2, 0.6, 0.6), 0, 0.8);
    const Detection dt(BoxRect(0.24, 0.2, 0.64, 0.6), 0, 0.6);
    const PseudoLabel out = wbf_fuse({st}, {dt}, 0.5);
    CHECK_THAT(out.box.x1, Catch::Matchers::WithinAbs(0.304 / 1.4, 1e-12));
    CHECK_THAT(out.box.y1, Catch::Matchers::WithinAbs(0.2, 1e-12));
    CHECK_THAT(out.box.x2, Catch::Matchers::WithinAbs(0.864 / 1.4, 1e-12));
    CHECK_THAT(out.box.y2, Catch::Matchers::WithinAbs(0.6, 1e-12));
    CHECK_THAT(out.fused_confidence, Catch::Matchers::WithinAbs(0.7, 1e-12));
  }
  SECTION("beta=1 keeps only the static-teacher confidence mean") {
    const Detection st(BoxRect(0.2, 0.2, 0.6, 0.6), 0, 0.8);
    const Detection dt(BoxRect(0.24, 0.2, 0.64, 0.6), 0, 0.6);
    const PseudoLabel full = wbf_fuse({st}, {dt}, 1.0);
    CHECK_THAT(full.fused_confidence, Catch::Matchers::WithinAbs(0.8, 1e-15));
    CHECK(full.box == wbf_fuse({st}, {dt}, 0.0).box);  // box never depends on beta
  }
  SECTION("preconditions") {
    const Detection d(BoxRect(0.2, 0.2, 0.6, 0.6), 0, 0.8);
    const Detection other(BoxRect(0.2, 0.2, 0.6, 0.6), 1, 0.8);
    CHECK_THROWS_AS(wbf_fuse({}, {d}, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(wbf_fuse({d}, {}, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(wbf_fuse({d, other}, {d}, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(wbf_fuse({d}, {d}, 1.5), std::invalid_argument);
  }
}

TEST_CASE("wbf_fuse matches the brute-force reference", "[boxes]") {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> size_dist(1, 4);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const int cls = trial % 3;
    const auto st = random_cluster(rng, size_dist(rng), cls);
    const auto dt = random_cluster(rng, size_dist(rng), cls);
    const double beta = unit(rng);
    const PseudoLabel fused = wbf_fuse(st, dt, beta);
    const WbfReference ref = wbf_fuse_reference(st, dt, beta);
    CHECK_THAT(fused.box.x1, Catch::Matchers::WithinAbs(ref.x1, 1e-9));
    CHECK_THAT(fused.box.y1, Catch::Matchers::WithinAbs(ref.y1, 1e-9));
    CHECK_THAT(fused.box.x2, Catch::Matchers::WithinAbs(ref.x2, 1e-9));
    CHECK_THAT(fused.box.y2, Catch::Matchers::WithinAbs(ref.y2, 1e-9));
    CHECK_THAT(fused.fused_confidence, Catch::Matchers::WithinAbs(ref.confidence, 1e-9));
  }
}

TEST_CASE("wbf_fuse algebraic properties", "[boxes]") {
  std::mt19937_64 rng(19);
  std::uniform_int_distribution<int> size_dist(1, 4);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    const auto st = random_cluster(rng, size_dist(rng), 2);
    const auto dt = random_cluster(rng, size_dist(rng), 2);

    // box is invariant to beta, bit-exact
    const PseudoLabel a = wbf_fuse(st, dt, 0.1);
    const PseudoLabel b = wbf_fuse(st, dt, 0.9);
    CHECK(a.box == b.box);

    // swapping clusters at beta=0.5 changes nothing, bit-exact
    const PseudoLabel fwd = wbf_fuse(st, dt, 0.5);
    const PseudoLabel rev = wbf_fuse(dt, st, 0.5);
    CHECK(fwd.box == rev.box);
    CHECK(fwd.fused_confidence == rev.fused_confidence);

    // fused coordinates stay inside the envelope of the inputs
    double lo[4] = {1, 1, 1, 1}, hi[4] = {0, 0, 0, 0};
    auto widen = [&](const Detection& d) {
      const double coords[4] = {d.box.x1, d.box.y1, d.box.x2, d.box.y2};
      for (int k = 0; k < 4; ++k) {
        lo[k] = std::min(lo[k], coords[k]);
        hi[k] = std::max(hi[k], coords[k]);
      }
    };
    for (const auto& d : st) widen(d);
    for (const auto& d : dt) widen(d);
    const double out[4] = {fwd.box.x1, fwd.box.y1, fwd.box.x2, fwd.box.y2};
    for (int k = 0; k < 4; ++k) {
      CHECK(out[k] >= lo[k] - 1e-12);
      CHECK(out[k] <= hi[k] + 1e-12);
    }

    // confidence homogeneity: scaling every confidence by lambda keeps the
    // box and scales the fused confidence
    const double lambda = 0.25 + 0.7 * unit(rng);
    auto scaled = [&](const std::vector<Detection>& dets) {
      std::vector<Detection> out_dets;
      for (const auto& d : dets)
        out_dets.emplace_back(d.box, d.class_id, d.confidence * lambda);
      return out_dets;
    };
    const PseudoLabel sc = wbf_fuse(scaled(st), scaled(dt), 0.5);
    CHECK_THAT(sc.box.x1, Catch::Matchers::WithinAbs(fwd.box.x1, 1e-12));
    CHECK_THAT(sc.box.x2, Catch::Matchers::WithinAbs(fwd.box.x2, 1e-12));
    CHECK_THAT(sc.fused_confidence,
               Catch::Matchers::WithinAbs(lambda * fwd.fused_confidence, 1e-12));
  }
}

TEST_CASE("consensus hand cases", "[boxes]") {
  const ConsensusConfig cfg;

  SECTION("both teachers empty") { CHECK(consensus({}, {}, cfg).empty()); }
  SECTION("exact agreement fuses to the confidence mean") {
    const BoxRect b(0.2, 0.2, 0.6, 0.6);
    const auto out = consensus({Detection(b, 1, 0.9)}, {Detection(b, 1, 0.7)}, cfg);
    REQUIRE(out.size() == 1);
    CHECK(out[0].class_id == 1);
    CHECK_THAT(out[0].fused_confidence, Catch::Matchers::WithinAbs(0.8, 1e-12));
    CHECK_THAT(out[0].box.x1, Catch::Matchers::WithinAbs(0.2, 1e-12));
  }
  SECTION("disjoint predictions produce nothing") {
    const auto out = consensus({Detection(BoxRect(0.1, 0.1, 0.3, 0.3), 0, 0.9)},
                               {Detection(BoxRect(0.6, 0.6, 0.8, 0.8), 0, 0.9)}, cfg);
    CHECK(out.empty());
  }
}

TEST_CASE("consensus size and class bounds", "[boxes]") {
  std::mt19937_64 rng(23);
  const ConsensusConfig cfg;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Detection> st, dt;
    for (int i = 0; i < 8; ++i) {
      st.emplace_back(random_box(rng), i % 3, 0.05 + 0.95 * unit(rng));
      dt.emplace_back(random_box(rng), i % 3, 0.05 + 0.95 * unit(rng));
    }
    const auto st_kept = confidence_filter(nms(st, cfg.nms_iou), cfg.delta);
    const auto dt_kept = confidence_filter(nms(dt, cfg.nms_iou), cfg.delta);
    const auto out = consensus(st, dt, cfg);
    CHECK(out.size() <= std::min(st_kept.size(), dt_kept.size()));
    for (const auto& p : out) {
      CHECK(p.fused_confidence >= cfg.delta);
      const auto has_class = [&](const std::vector<Detection>& dets) {
        for (const auto& d : dets)
          if (d.class_id == p.class_id) return true;
        return false;
      };
      CHECK(has_class(st_kept));
      CHECK(has_class(dt_kept));
    }
  }
}

TEST_CASE("detection records round trip through JSON lines", "[boxes]") {
  const Detection d(BoxRect(0.125, 0.25, 0.625, 0.875), 2, 0.7311);
  int64_t image_id = -1;
  const Detection back = detection_from_record(detection_record(42, d), &image_id);
  CHECK(image_id == 42);
  CHECK(back.box == d.box);
  CHECK(back.class_id == d.class_id);
  CHECK(back.confidence == d.confidence);

  const PseudoLabel p(BoxRect(0.1, 0.2, 0.3, 0.4), 1, 0.66);
  const auto rec = pseudo_label_record(7, p);
  CHECK(rec.at("confidence").get<double>() == 0.66);
  CHECK(rec.at("image_id").get<int64_t>() == 7);
}
