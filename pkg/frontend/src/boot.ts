/** Browser entry point: mount the editor against the serving origin and
 * open the first available task. */
import { ApiClient } from "./api.js";
import { mountEditor } from "./main.js";

export async function boot(rootId = "app"): Promise<void> {
  const root = document.getElementById(rootId);
  if (!root) throw new Error(`no #${rootId} element`);
  const api = new ApiClient(window.location.origin, (url, init) =>
    window.fetch(url, init),
  );
  const handle = mountEditor(root, api, { drafts: window.localStorage });
  const found = await handle.editor.openNext();
  if (!found) root.textContent = "no tasks available";
  handle.render();
}
