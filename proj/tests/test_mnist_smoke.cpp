// Twenty stage-1 epochs of minicnn on the MNIST subset; the training loss
// must end lower than it started.

#include <fstream>
#include <sstream>

#include "biper/cli.hpp"
#include "doctest.h"
#include "json.hpp"
#include "support.hpp"

using nlohmann::json;

TEST_CASE("minicnn on MNIST lowers its training loss over 20 epochs") {
  testing::TempDir dir("mnist-smoke");
  std::ostringstream out, err;
  const int code = biper::cli::run({"train", "--config", BIPER_SOURCE_DIR "/configs/desk_mnist.ini", "--data-dir",
                                    BIPER_MNIST_DIR, "--epochs", "20", "--seed", "0", "--out",
                                    (dir / "run").string(), "--quiet"},
                                   out, err);
  REQUIRE_MESSAGE(code == 0, err.str());
  std::ifstream in(dir / "run" / "record.json");
  const json record = json::parse(in);
  const auto& epochs = record["epochs"];
  REQUIRE(epochs.size() == 20);
  const double first = epochs.front()["train_loss"], last = epochs.back()["train_loss"];
  MESSAGE("train loss epoch 1 " << first << ", epoch 20 " << last << ", val top1 " << record["final_eval"]["top1"]);
  CHECK(last < first);
}
