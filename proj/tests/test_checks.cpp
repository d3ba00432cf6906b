#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "voxseg/checks.hpp"

using namespace voxseg;

// The acceptance harness runs these suites at full strength (20 instances,
// 50 conv configs, 200 nsd pairs); here we run reduced counts so plain
// `ctest` still exercises every entry quickly.

TEST_CASE("gradient suite passes for every op and block") {
  const auto results = checks::gradient_suite(/*seed=*/101, /*instances=*/3,
                                              /*tolerance=*/1e-2);
  CHECK(results.size() == 19);
  std::set<std::string> names;
  for (const auto& r : results) {
    INFO(r.name, " worst=", r.worst);
    CHECK(r.pass);
    CHECK(r.instances == 3);
    CHECK(r.worst < r.tolerance);
    names.insert(r.name);
  }
  CHECK(names.size() == results.size());  // no duplicate entries
  // spot-check that the suite spans ops, blocks and losses
  CHECK(names.count("conv3d_dilated") == 1);
  CHECK(names.count("batchnorm3d_train") == 1);
  CHECK(names.count("combined_loss") == 1);
  CHECK(names.count("deep_supervision_head") == 1);
}

TEST_CASE("gradient suite is deterministic per seed") {
  const auto a = checks::gradient_suite(7, 2, 1e-2);
  const auto b = checks::gradient_suite(7, 2, 1e-2);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    CHECK(a[i].worst == b[i].worst);  // bitwise: same fixtures, same arithmetic
  }
}

TEST_CASE("conv oracle agreement on random configs") {
  const auto r = checks::conv_oracle(/*seed=*/55, /*configs=*/12, /*tolerance=*/1e-4);
  CHECK(r.pass);
  CHECK(r.instances == 12);
  CHECK(r.worst < 1e-4);
}

TEST_CASE("nsd oracle agreement is bitwise") {
  const auto r = checks::nsd_oracle(/*seed=*/55, /*pairs=*/40);
  CHECK(r.pass);
  CHECK(r.instances == 40);
  CHECK(r.worst == 0.0);
}
