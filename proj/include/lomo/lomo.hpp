#pragma once

// Everything except the INI loader (lomo/config_file.hpp), which pulls in CLI11.

#include "lomo/error.hpp"
#include "lomo/half.hpp"
#include "lomo/kernels.hpp"
#include "lomo/memory_estimator.hpp"
#include "lomo/memory_ledger.hpp"
#include "lomo/model_zoo.hpp"
#include "lomo/optimizers.hpp"
#include "lomo/stabilization.hpp"
#include "lomo/stabilized_steps.hpp"
#include "lomo/tape.hpp"
#include "lomo/tensor.hpp"
#include "lomo/trainer.hpp"
