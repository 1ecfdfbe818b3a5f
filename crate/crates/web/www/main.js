import init, { Stepper, transition_table, profile_diff, simulate } from "./pkg/teleop_web.js";

const $ = (id) => document.getElementById(id);

const SAMPLE = [
  {
    vehicle_id: "v1",
    route_length: 400,
    cruise_speed: 10,
    events: [
      { at: 20, kind: { type: "trajectory_blocked", duration_s: 1000,
        blockage: { options: [{ descriptor: "pass_left", viable: true }] } } },
      { at: 20, kind: { type: "ads_mrm", reason: "blocked_lane" } },
    ],
  },
  {
    vehicle_id: "v2",
    route_length: 300,
    cruise_speed: 12,
    events: [{ at: 10, kind: { type: "ads_mrm", reason: "lidar_degraded", reason_persists_s: 8 } }],
  },
];

let stepper;

function setters(s) {
  return {
    trajectory_valid: (v) => s.set_trajectory_valid(v),
    mrc_reason_remaining: (v) => s.set_mrc_reason_remaining(v),
    operator_attached: (v) => s.set_operator_attached(v),
    ads_functions_available: (v) => s.set_ads_functions_available(v),
  };
}

function syncGuards() {
  const set = setters(stepper);
  for (const box of document.querySelectorAll("#guards input[type=checkbox]")) {
    set[box.dataset.guard](box.checked);
  }
  const q = Number($("link").value);
  stepper.set_link_quality(q);
  $("link-value").textContent = q.toFixed(2);
}

function render() {
  $("state").textContent = stepper.state();
  const controls = $("controls");
  controls.replaceChildren();
  for (const a of JSON.parse(stepper.affordances())) {
    for (const actor of a.actors) {
      const b = document.createElement("button");
      b.textContent = `${a.label} (${actor})`;
      b.disabled = !a.enabled;
      if (a.reason) b.title = a.reason;
      b.onclick = () => {
        try {
          stepper.apply(JSON.stringify(a.kind), actor);
          $("step-error").textContent = "";
        } catch (e) {
          $("step-error").textContent = String(e);
        }
        render();
      };
      controls.append(b);
    }
  }
  const lines = JSON.parse(stepper.history()).map(
    (s) => `${s.from} --${JSON.stringify(s.event.kind)} (${s.event.actor})--> ${s.next}` +
      (s.effects.length ? `  [${s.effects.join(", ")}]` : ""),
  );
  $("history").textContent = lines.join("\n");
}

function newStepper() {
  stepper = new Stepper($("profile").value);
  syncGuards();
  render();
}

await init();

$("table-generic").textContent = transition_table("generic");
$("table-german").textContent = transition_table("german");
$("diff").textContent = JSON.stringify(JSON.parse(profile_diff("generic", "german")), null, 2);

$("profile").onchange = newStepper;
$("reset").onclick = () => { stepper.reset(); render(); };
for (const input of document.querySelectorAll("#guards input")) {
  input.oninput = () => { syncGuards(); render(); };
}

$("scenario").value = JSON.stringify(SAMPLE, null, 2);
$("run").onclick = () => {
  try {
    $("summary").textContent = simulate($("scenario").value, $("profile").value, $("policy").value, BigInt($("seed").value));
  } catch (e) {
    $("summary").textContent = String(e);
  }
};

newStepper();
