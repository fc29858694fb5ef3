// Copyright 2026 The PatchMVS Authors. All Rights Reserved.
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

#include "patchmvs/common.hpp"
#include "patchmvs/depth_refine.hpp"
#include "patchmvs/features.hpp"
#include "patchmvs/fusion.hpp"
#include "patchmvs/geometry.hpp"
#include "patchmvs/image.hpp"
#include "patchmvs/io.hpp"
#include "patchmvs/losses.hpp"
#include "patchmvs/pipeline.hpp"
#include "patchmvs/plane_sweep.hpp"
#include "patchmvs/synthetic.hpp"
#include "patchmvs/view_selection.hpp"
