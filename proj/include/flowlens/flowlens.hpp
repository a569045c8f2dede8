// Copyright 2026 The flowlens Authors.
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

#pragma once

#include "flowlens/address.hpp"
#include "flowlens/binio.hpp"
#include "flowlens/checkpoint.hpp"
#include "flowlens/contrastive.hpp"
#include "flowlens/dataset_io.hpp"
#include "flowlens/dnn.hpp"
#include "flowlens/encoder.hpp"
#include "flowlens/evaluation.hpp"
#include "flowlens/experiment.hpp"
#include "flowlens/flow.hpp"
#include "flowlens/labels.hpp"
#include "flowlens/netflow.hpp"
#include "flowlens/nn.hpp"
#include "flowlens/ops.hpp"
#include "flowlens/optim.hpp"
#include "flowlens/pcap.hpp"
#include "flowlens/pcap_writer.hpp"
#include "flowlens/pipeline.hpp"
#include "flowlens/rng.hpp"
#include "flowlens/synth.hpp"
#include "flowlens/tensor.hpp"
#include "flowlens/tokenize.hpp"
